//! Per-node Kalman filtering: local estimates, gains, error covariances and
//! pairwise cross-covariances.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{c, f, spectral_norm, spectral_radius, sym, Mat, Real, Vec_};
use crate::model_core::SystemModel;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct LocalFilterState<T: Real> {
    pub node: usize,
    pub xhat: Vec_<T>,
    pub k: Mat<T>,
    pub gk: Mat<T>,
    pub phik: Mat<T>,
    pub pii: Mat<T>,
    pub pstar: Mat<T>,
    pub t: usize,
}

impl<T: Real> LocalFilterState<T> {
    /// State at time 0: estimate `x0`, error covariance `p0`, identity gain maps.
    pub fn initial(node: usize, model: &SystemModel<T>, x0: Vec_<T>, p0: Mat<T>) -> Self {
        let n = model.n();
        let q = model.sensors[node].c.nrows();
        let gk = DMatrix::identity(n, n);
        LocalFilterState {
            node,
            xhat: x0,
            k: DMatrix::zeros(n, q),
            phik: &gk * &model.a,
            gk,
            pstar: p0.clone(),
            pii: p0,
            t: 0,
        }
    }
}

/// Covariance half of one filter step: `(P*, K, G_K, P)`.
pub fn riccati_step<T: Real>(pii: &Mat<T>, model: &SystemModel<T>, node: usize) -> Result<(Mat<T>, Mat<T>, Mat<T>, Mat<T>)> {
    let s = model.sensor(node)?;
    let n = model.n();
    let pstar = sym(&(&model.a * pii * model.a.transpose() + &model.qw));
    let innov = &s.c * &pstar * s.c.transpose() + &s.qv;
    let inv = innov
        .try_inverse()
        .ok_or_else(|| Error::Numeric(format!("innovation covariance of node {} is singular", node + 1)))?;
    let k = &pstar * s.c.transpose() * inv;
    let gk = DMatrix::identity(n, n) - &k * &s.c;
    let p = sym(&(&gk * &pstar));
    Ok((pstar, k, gk, p))
}

/// One Kalman step from `t` to `t+1` using the measurement taken at `t+1`.
pub fn kalman_step<T: Real>(state: &LocalFilterState<T>, y: &Vec_<T>, model: &SystemModel<T>) -> Result<LocalFilterState<T>> {
    let s = model.sensor(state.node)?;
    if y.len() != s.c.nrows() {
        return Err(Error::Contract(format!(
            "measurement of node {} has length {}, expected {}",
            state.node + 1,
            y.len(),
            s.c.nrows()
        )));
    }
    let (pstar, k, gk, pii) = riccati_step(&state.pii, model, state.node)?;
    let phik = &gk * &model.a;
    let xhat = &phik * &state.xhat + &k * y;
    Ok(LocalFilterState { node: state.node, xhat, k, gk, phik, pii, pstar, t: state.t + 1 })
}

/// Cross-covariance of two local estimation errors, advanced to the time of `fi` and `fj`.
#[derive(Clone, Debug)]
pub struct CrossCovariance<T: Real> {
    pub i: usize,
    pub j: usize,
    pub pij: Mat<T>,
    pub t: usize,
}

/// `P_ij(t) = G_Ki(t) [Qw + A P_ij(t-1) A^T] G_Kj(t)^T`.
pub fn cross_covariance_step<T: Real>(
    prev: &CrossCovariance<T>,
    fi: &LocalFilterState<T>,
    fj: &LocalFilterState<T>,
    model: &SystemModel<T>,
) -> Result<CrossCovariance<T>> {
    if prev.i == prev.j {
        return Err(Error::Contract("cross-covariance needs two distinct nodes".into()));
    }
    if fi.t != fj.t || fi.t != prev.t + 1 {
        return Err(Error::Contract(format!(
            "filters at t = {} and {} do not follow cross-covariance at t = {}",
            fi.t, fj.t, prev.t
        )));
    }
    let pij = cross_update(&prev.pij, &fi.gk, &fj.gk, model);
    Ok(CrossCovariance { i: prev.i, j: prev.j, pij, t: prev.t + 1 })
}

pub(crate) fn cross_update<T: Real>(pij: &Mat<T>, gki: &Mat<T>, gkj: &Mat<T>, model: &SystemModel<T>) -> Mat<T> {
    gki * (&model.qw + &model.a * pij * model.a.transpose()) * gkj.transpose()
}

#[derive(Clone, Debug)]
pub struct SteadyFilter<T: Real> {
    pub node: usize,
    pub pii: Mat<T>,
    pub pstar: Mat<T>,
    pub k: Mat<T>,
    pub gk: Mat<T>,
    pub phik: Mat<T>,
    pub iterations: usize,
}

/// Iterates the gain recursion from `p0` until successive covariances differ
/// by less than `tol` in spectral norm.
pub fn steady_state_from<T: Real>(
    model: &SystemModel<T>,
    node: usize,
    p0: &Mat<T>,
    tol: T,
    max_iter: usize,
) -> Result<SteadyFilter<T>> {
    let mut p = p0.clone();
    for it in 1..=max_iter {
        let (pstar, k, gk, next) = riccati_step(&p, model, node)?;
        let diff = spectral_norm(&(&next - &p));
        p = next;
        if diff < tol {
            let phik = &gk * &model.a;
            let rho = spectral_radius(&phik)?;
            if rho >= T::one() {
                return Err(Error::Divergence(format!(
                    "node {}: steady closed-loop matrix has spectral radius {}",
                    node + 1,
                    f(rho)
                )));
            }
            return Ok(SteadyFilter { node, pii: p, pstar, k, gk, phik, iterations: it });
        }
    }
    Err(Error::Divergence(format!("node {}: gain recursion did not settle in {max_iter} steps", node + 1)))
}

pub fn steady_state<T: Real>(model: &SystemModel<T>, node: usize, tol: T, max_iter: usize) -> Result<SteadyFilter<T>> {
    let n = model.n();
    steady_state_from(model, node, &DMatrix::identity(n, n), tol, max_iter)
}

pub fn default_steady<T: Real>(model: &SystemModel<T>, node: usize) -> Result<SteadyFilter<T>> {
    steady_state(model, node, c(1e-10), 100_000)
}

/// Zero vector of the state dimension.
pub fn zero_state<T: Real>(n: usize) -> Vec_<T> {
    DVector::zeros(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{from_rows, max_abs};
    use crate::model_core::SensorModel;
    use crate::sim_harness::scenarios;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn perfect_measurement_limit() {
        let model = SystemModel::<f64> {
            a: from_rows(&[&[0.9, 0.1], &[0.0, 0.8]]),
            qw: DMatrix::identity(2, 2),
            sensors: vec![SensorModel { id: 1, c: DMatrix::identity(2, 2), qv: DMatrix::identity(2, 2) * 1e-12 }],
        };
        let s = steady_state(&model, 0, 1e-12, 1000).unwrap();
        assert!(max_abs(&(&s.k - DMatrix::identity(2, 2))) < 1e-9);
        assert!(max_abs(&s.pii) < 1e-9);
    }

    #[test]
    fn gk_definition_holds() {
        let sc = scenarios::example2::<f64>().unwrap();
        let mut st = LocalFilterState::initial(0, &sc.model, zero_state(4), DMatrix::identity(4, 4));
        for _ in 0..5 {
            st = kalman_step(&st, &DVector::from_vec(vec![0.3, -0.1, 0.2, 0.0]), &sc.model).unwrap();
            let cm = &sc.model.sensors[0].c;
            assert!(max_abs(&(&st.gk - (DMatrix::identity(4, 4) - &st.k * cm))) < 1e-15);
            assert!(crate::linalg::lambda_min(&st.pii) > -1e-12);
        }
    }

    #[test]
    fn steady_state_independent_of_start() {
        let sc = scenarios::example2::<f64>().unwrap();
        for node in 0..2 {
            let a = steady_state_from(&sc.model, node, &DMatrix::identity(4, 4), 1e-12, 100_000).unwrap();
            let b = steady_state_from(&sc.model, node, &(DMatrix::identity(4, 4) * 100.0), 1e-12, 100_000).unwrap();
            assert!(max_abs(&(&a.pii - &b.pii)) < 1e-8);
            assert!(spectral_radius(&a.phik).unwrap() < 1.0);
        }
    }

    #[test]
    fn cross_update_plus_noise_term_is_joseph_form() {
        let sc = scenarios::example1::<f64>(0.5).unwrap();
        let mut model = sc.model.clone();
        model.sensors.push(SensorModel { id: 2, ..model.sensors[0].clone() });
        let p0 = DMatrix::identity(2, 2);
        let mut fi = LocalFilterState::initial(0, &model, zero_state(2), p0.clone());
        let mut fj = LocalFilterState::initial(1, &model, zero_state(2), p0.clone());
        let mut cc = CrossCovariance { i: 0, j: 1, pij: p0, t: 0 };
        for _ in 0..20 {
            let y = DVector::from_vec(vec![0.0]);
            fj = kalman_step(&fj, &y, &model).unwrap();
            let prev = fi.pii.clone();
            fi = kalman_step(&fi, &y, &model).unwrap();
            let joseph = cross_update(&prev, &fi.gk, &fi.gk, &model) + &fi.k * &model.sensors[0].qv * fi.k.transpose();
            assert!(max_abs(&(&joseph - &fi.pii)) < 1e-9);
            cc = cross_covariance_step(&cc, &fi, &fj, &model).unwrap();
            assert!(max_abs(&(&cc.pij - cc.pij.transpose())) < 1e-12);
        }
        let same = CrossCovariance { i: 0, j: 0, pij: cc.pij.clone(), t: cc.t };
        assert!(cross_covariance_step(&same, &fi, &fi, &model).is_err());
    }

    /// The filter estimate at t = 3 equals direct Gaussian conditioning of x(3)
    /// on the stacked measurements y(1..3).
    #[test]
    fn matches_batch_conditioning() {
        let model = SystemModel::<f64> {
            a: from_rows(&[&[0.8, 0.3], &[-0.2, 0.7]]),
            qw: from_rows(&[&[0.5, 0.1], &[0.1, 0.3]]),
            sensors: vec![SensorModel { id: 1, c: from_rows(&[&[1.0, 0.5]]), qv: from_rows(&[&[0.4]]) }],
        };
        let p0 = from_rows::<f64>(&[&[2.0, 0.3], &[0.3, 1.0]]);
        // Joint covariance of (x(0), x(1), x(2), x(3)).
        let a = &model.a;
        let mut cov = vec![vec![DMatrix::<f64>::zeros(2, 2); 4]; 4];
        cov[0][0] = p0.clone();
        for t in 1..4 {
            for s in 0..t {
                cov[t][s] = a * &cov[t - 1][s];
                cov[s][t] = cov[t][s].transpose();
            }
            cov[t][t] = a * &cov[t - 1][t - 1] * a.transpose() + &model.qw;
        }
        let cm = &model.sensors[0].c;
        let syy = DMatrix::from_fn(3, 3, |r, s| (cm * &cov[r + 1][s + 1] * cm.transpose())[(0, 0)] + if r == s { 0.4 } else { 0.0 });
        let sxy = DMatrix::from_fn(2, 3, |r, s| (&cov[3][s + 1] * cm.transpose())[(r, 0)]);
        let gain = &sxy * syy.try_inverse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ys: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
        let batch = &gain * DVector::from_vec(ys.clone());
        let mut st = LocalFilterState::initial(0, &model, zero_state(2), p0);
        for y in ys {
            st = kalman_step(&st, &DVector::from_vec(vec![y]), &model).unwrap();
        }
        assert!((&st.xhat - batch).amax() < 1e-10);
        let post = &cov[3][3] - &gain * sxy.transpose();
        assert!(max_abs(&(&st.pii - post)) < 1e-10);
    }

    #[test]
    fn example1_steady_gain() {
        let sc = scenarios::example1::<f64>(0.5).unwrap();
        let s = default_steady(&sc.model, 0).unwrap();
        // Closed-loop matrix of the detectable reading of the first example.
        let expect = from_rows::<f64>(&[&[0.470625, -0.857312], &[0.034147, 0.037561]]);
        assert!(max_abs(&(&s.phik - expect)) < 1e-5, "{}", s.phik);
    }
}
