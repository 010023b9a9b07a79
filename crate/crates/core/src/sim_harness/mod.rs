//! Scenario files, bundled example setups, oracles and artifact writers behind the CLI.

pub mod artifacts;
pub mod monte_carlo;
pub mod oracle;
pub mod scenarios;

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::linalg::{c, lcm, Mat, Real, Vec_};
use crate::model_core::{validate_model, SensorModel, SystemModel};
use crate::reduction_channel::{build_scheme, DelayMode, SelectionScheme};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct Sweep<T: Real> {
    /// Zero-based node whose probabilities are swept.
    pub node: usize,
    pub probs: Vec<Vec<T>>,
}

#[derive(Clone, Debug)]
pub struct Scenario<T: Real> {
    pub name: String,
    pub model: SystemModel<T>,
    pub schemes: Vec<SelectionScheme<T>>,
    pub delays: Vec<usize>,
    pub delay_modes: Vec<DelayMode>,
    pub horizon: usize,
    pub seed: u64,
    pub replicas: usize,
    /// Prior mean of `x(0)`; also the initial local and compensating estimates.
    pub mean0: Vec_<T>,
    /// Prior covariance of `x(0)`, i.e. every `P_ij(0)`.
    pub p0: Mat<T>,
    pub sweep: Option<Sweep<T>>,
    pub out_dir: Option<PathBuf>,
}

impl<T: Real> Scenario<T> {
    pub fn n(&self) -> usize {
        self.model.n()
    }

    pub fn num_nodes(&self) -> usize {
        self.model.num_nodes()
    }

    /// lcm of `d_i + 1` over all nodes.
    pub fn lcm_period(&self) -> usize {
        self.delays.iter().fold(1, |p, &d| lcm(p, d + 1))
    }

    /// Copy with the probabilities of one node replaced.
    pub fn with_probs(&self, node: usize, probs: &[T]) -> Result<Self> {
        let mut s = self.clone();
        let old = &self.schemes[node];
        s.schemes[node] = build_scheme(node, old.n, old.r, probs)?;
        Ok(s)
    }

    pub fn with_p0(&self, p0: Mat<T>) -> Self {
        Scenario { p0, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        validate_model(&self.model).into_result()?;
        let l = self.num_nodes();
        if self.schemes.len() != l || self.delays.len() != l || self.delay_modes.len() != l {
            return Err(Error::Validation("node counts of model, schemes and links disagree".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Validation("horizon must be positive".into()));
        }
        if self.mean0.len() != self.n() || self.p0.nrows() != self.n() || self.p0.ncols() != self.n() {
            return Err(Error::Validation("initial mean or covariance has the wrong dimension".into()));
        }
        if crate::linalg::lambda_min(&self.p0) < c(-1e-10) {
            return Err(Error::Validation("initial covariance is not positive semidefinite".into()));
        }
        Ok(())
    }
}

#[derive(Deserialize, Clone, Debug)]
#[serde(untagged)]
enum MatSpec {
    Scalar(f64),
    Full(Vec<Vec<f64>>),
    Diag { diag: Vec<f64> },
}

impl MatSpec {
    fn build<T: Real>(&self, field: &str) -> Result<Mat<T>> {
        match self {
            MatSpec::Scalar(x) => Ok(DMatrix::from_element(1, 1, c(*x))),
            MatSpec::Diag { diag } => Ok(DMatrix::from_diagonal(&DVector::from_iterator(diag.len(), diag.iter().map(|&x| c(x))))),
            MatSpec::Full(rows) => {
                let r = rows.len();
                let k = rows.first().map(|x| x.len()).unwrap_or(0);
                if rows.iter().any(|row| row.len() != k) {
                    return Err(Error::Validation(format!("{field}: rows of unequal length")));
                }
                Ok(DMatrix::from_fn(r, k, |i, j| c(rows[i][j])))
            }
        }
    }
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    #[serde(rename = "A")]
    a: MatSpec,
    #[serde(rename = "Qw")]
    qw: MatSpec,
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct NodeFile {
    #[serde(rename = "C")]
    c: MatSpec,
    #[serde(rename = "Qv")]
    qv: MatSpec,
    r: usize,
    probs: Vec<f64>,
    #[serde(default)]
    delay: usize,
    #[serde(default)]
    delay_mode: Option<String>,
}

#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields)]
struct InitialFile {
    mean: Option<Vec<f64>>,
    #[serde(rename = "P0")]
    p0: Option<MatSpec>,
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    node: usize,
    probs: Vec<Vec<f64>>,
}

#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields)]
struct OutputFile {
    dir: Option<String>,
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: Option<String>,
    horizon: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default = "one")]
    replicas: usize,
    model: ModelFile,
    node: Vec<NodeFile>,
    #[serde(default)]
    initial: InitialFile,
    sweep: Option<SweepFile>,
    #[serde(default)]
    output: OutputFile,
}

fn one() -> usize {
    1
}

/// Parses a scenario from its text form. `origin` labels error messages.
pub fn parse_scenario<T: Real>(text: &str, origin: &str) -> Result<Scenario<T>> {
    let file: ScenarioFile = toml::from_str(text).map_err(|e| Error::Parse(format!("{origin}: {e}")))?;
    let a: Mat<T> = file.model.a.build("model.A")?;
    let qw: Mat<T> = file.model.qw.build("model.Qw")?;
    let n = a.nrows();
    let mut sensors = Vec::new();
    let mut schemes = Vec::new();
    let mut delays = Vec::new();
    let mut modes = Vec::new();
    for (k, nd) in file.node.iter().enumerate() {
        let field = |s: &str| format!("{origin}: node[{k}].{s}");
        sensors.push(SensorModel { id: k + 1, c: nd.c.build(&field("C"))?, qv: nd.qv.build(&field("Qv"))? });
        let probs: Vec<T> = nd.probs.iter().map(|&p| c(p)).collect();
        let scheme = if nd.r == n {
            if probs.len() != 1 {
                return Err(Error::Validation(field("probs: full transmission takes a single probability")));
            }
            SelectionScheme::full_transmission(k, n)
        } else {
            build_scheme(k, n, nd.r, &probs).map_err(|e| Error::Validation(format!("{}: {e}", field("probs"))))?
        };
        schemes.push(scheme);
        delays.push(nd.delay);
        modes.push(match nd.delay_mode.as_deref() {
            None | Some("constant") => DelayMode::Constant,
            Some("bounded") => DelayMode::Bounded,
            Some(other) => return Err(Error::Validation(format!("{}: unknown mode {other:?}", field("delay_mode")))),
        });
    }
    let mean0 = match &file.initial.mean {
        Some(m) => DVector::from_iterator(m.len(), m.iter().map(|&x| c(x))),
        None => DVector::zeros(n),
    };
    let p0 = match &file.initial.p0 {
        Some(m) => m.build(&format!("{origin}: initial.P0"))?,
        None => DMatrix::identity(n, n),
    };
    let sweep = match file.sweep {
        Some(s) => {
            if s.node == 0 || s.node > file.node.len() {
                return Err(Error::Validation(format!("{origin}: sweep.node {} out of range", s.node)));
            }
            Some(Sweep { node: s.node - 1, probs: s.probs.iter().map(|v| v.iter().map(|&p| c(p)).collect()).collect() })
        }
        None => None,
    };
    let sc = Scenario {
        name: file.name.unwrap_or_else(|| "scenario".into()),
        model: SystemModel { a, qw, sensors },
        schemes,
        delays,
        delay_modes: modes,
        horizon: file.horizon,
        seed: file.seed,
        replicas: file.replicas.max(1),
        mean0,
        p0,
        sweep,
        out_dir: file.output.dir.map(PathBuf::from),
    };
    sc.validate().map_err(|e| match e {
        Error::Validation(m) => Error::Validation(format!("{origin}: {m}")),
        other => other,
    })?;
    Ok(sc)
}

pub fn load_scenario<T: Real>(path: &Path) -> Result<Scenario<T>> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario(&text, &path.display().to_string())
}
