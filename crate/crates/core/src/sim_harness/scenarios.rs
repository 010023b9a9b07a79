//! Bundled example setups and seeded random toy instances.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{parse_scenario, Scenario};
use crate::linalg::{c, Real};
use crate::model_core::{structural_check, SensorModel, SystemModel};
use crate::reduction_channel::{build_scheme, DelayMode};
use crate::Result;

pub const EXAMPLE1_TEXT: &str = include_str!("../../scenarios/example1.scenario");
pub const EXAMPLE2_TEXT: &str = include_str!("../../scenarios/example2.scenario");

/// Example 1 with `P(first mask) = gamma`.
pub fn example1<T: Real>(gamma: f64) -> Result<Scenario<T>> {
    let sc: Scenario<T> = parse_scenario(EXAMPLE1_TEXT, "example1.scenario")?;
    sc.with_probs(0, &[c(gamma), c(1.0 - gamma)])
}

pub fn example2<T: Real>() -> Result<Scenario<T>> {
    parse_scenario(EXAMPLE2_TEXT, "example2.scenario")
}

/// Shape limits for [`random_toy`].
#[derive(Clone, Copy, Debug)]
pub struct ToyShape {
    pub max_nodes: usize,
    pub max_delay: usize,
    pub horizon: usize,
}

impl Default for ToyShape {
    fn default() -> Self {
        ToyShape { max_nodes: 2, max_delay: 2, horizon: 8 }
    }
}

/// Two-state toy with one of two components sent per tick. Draws are
/// repeated until every node passes the structural check.
pub fn random_toy<T: Real>(seed: u64, shape: ToyShape) -> Result<Scenario<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2;
    loop {
        let l = rng.gen_range(1..=shape.max_nodes.max(1));
        let a = DMatrix::from_fn(n, n, |_, _| c::<T>(rng.gen_range(-0.9..0.9)));
        let a = a + DMatrix::from_diagonal_element(n, n, c::<T>(rng.gen_range(0.2..0.6)));
        let b = DMatrix::from_fn(n, n, |_, _| c::<T>(rng.gen_range(-1.0..1.0)));
        let qw = &b * b.transpose() + DMatrix::identity(n, n) * c::<T>(0.1);
        let mut sensors = Vec::new();
        let mut schemes = Vec::new();
        let mut delays = Vec::new();
        for i in 0..l {
            let cm = DMatrix::from_fn(1, n, |_, _| c::<T>(rng.gen_range(-1.0..1.0)));
            let qv = DMatrix::from_element(1, 1, c::<T>(rng.gen_range(0.2..2.0)));
            sensors.push(SensorModel { id: i + 1, c: cm, qv });
            let p: f64 = rng.gen_range(0.15..0.85);
            schemes.push(build_scheme(i, n, 1, &[c(p), c(1.0 - p)])?);
            delays.push(rng.gen_range(0..=shape.max_delay));
        }
        let model = SystemModel { a, qw, sensors };
        let ok = (0..l).all(|i| structural_check(&model, i).map(|s| s.holds()).unwrap_or(false));
        if !ok {
            continue;
        }
        let p0 = DMatrix::from_fn(n, n, |i, j| if i == j { c::<T>(rng.gen_range(0.5..2.0)) } else { T::zero() });
        let sc = Scenario {
            name: format!("toy-{seed}"),
            model,
            schemes,
            delay_modes: vec![DelayMode::Constant; l],
            delays,
            horizon: shape.horizon,
            seed,
            replicas: 1,
            mean0: nalgebra::DVector::zeros(n),
            p0,
            sweep: None,
            out_dir: None,
        };
        sc.validate()?;
        return Ok(sc);
    }
}
