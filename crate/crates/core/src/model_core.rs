//! Plant and sensor models, noise statistics and their structural checks.

use nalgebra::{Complex, DMatrix};

use crate::linalg::{c, f, lambda_min, mat_pow, psd_sqrt, rank, Mat, Real};
use crate::{Error, Result};

/// Relative singular-value floor used by every rank decision.
pub const RANK_TOL: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct SensorModel<T: Real> {
    /// Node index, starting at 1.
    pub id: usize,
    /// Measurement matrix, q_i x n.
    pub c: Mat<T>,
    /// Measurement noise covariance, q_i x q_i.
    pub qv: Mat<T>,
}

#[derive(Clone, Debug)]
pub struct SystemModel<T: Real> {
    pub a: Mat<T>,
    pub qw: Mat<T>,
    pub sensors: Vec<SensorModel<T>>,
}

impl<T: Real> SystemModel<T> {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn num_nodes(&self) -> usize {
        self.sensors.len()
    }

    pub fn sensor(&self, node: usize) -> Result<&SensorModel<T>> {
        self.sensors
            .get(node)
            .ok_or_else(|| Error::Contract(format!("no sensor at index {node}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn into_result(self) -> Result<()> {
        if self.passed() {
            return Ok(());
        }
        let msg: Vec<String> = self
            .failures()
            .iter()
            .map(|c| format!("{}: {}", c.name, c.detail))
            .collect();
        Err(Error::Validation(msg.join("; ")))
    }
}

fn push(report: &mut ValidationReport, name: &str, passed: bool, detail: String) {
    report.checks.push(Check { name: name.to_string(), passed, detail });
}

/// Checks every structural invariant of a model. Failures are reported, never raised.
pub fn validate_model<T: Real>(model: &SystemModel<T>) -> ValidationReport {
    let mut r = ValidationReport { checks: Vec::new() };
    let n = model.a.nrows();
    push(&mut r, "A square", model.a.is_square(), format!("A is {}x{}", model.a.nrows(), model.a.ncols()));
    push(&mut r, "state dimension > 1", n > 1, format!("n = {n}"));
    let qw_ok = model.qw.nrows() == n && model.qw.ncols() == n;
    push(&mut r, "Qw dimension", qw_ok, format!("Qw is {}x{}, n = {n}", model.qw.nrows(), model.qw.ncols()));
    if qw_ok {
        let asym = crate::linalg::max_abs(&(&model.qw - model.qw.transpose()));
        push(&mut r, "Qw symmetric", asym <= c(1e-10), format!("max asymmetry {}", f(asym)));
        let lmin = lambda_min(&model.qw);
        push(&mut r, "Qw positive semidefinite", lmin >= c(-1e-10), format!("smallest eigenvalue {}", f(lmin)));
    }
    push(&mut r, "at least one sensor", !model.sensors.is_empty(), format!("{} sensors", model.sensors.len()));
    for (k, s) in model.sensors.iter().enumerate() {
        let q = s.c.nrows();
        let dims = s.c.ncols() == n && s.qv.nrows() == q && s.qv.ncols() == q;
        push(
            &mut r,
            &format!("sensor {} dimensions", k + 1),
            dims,
            format!("C is {}x{}, Qv is {}x{}, n = {n}", q, s.c.ncols(), s.qv.nrows(), s.qv.ncols()),
        );
        if dims && q > 0 {
            let asym = crate::linalg::max_abs(&(&s.qv - s.qv.transpose()));
            let lmin = lambda_min(&s.qv);
            push(&mut r, &format!("sensor {} Qv symmetric", k + 1), asym <= c(1e-10), format!("max asymmetry {}", f(asym)));
            push(
                &mut r,
                &format!("sensor {} Qv positive definite", k + 1),
                lmin > T::zero(),
                format!("smallest eigenvalue {}", f(lmin)),
            );
        }
    }
    r
}

/// `[B, AB, ..., A^{n-1}B]`.
pub fn controllability_matrix<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    let n = a.nrows();
    let m = b.ncols();
    let mut out = DMatrix::zeros(n, n * m);
    let mut blk = b.clone();
    for k in 0..n {
        out.view_mut((0, k * m), (n, m)).copy_from(&blk);
        blk = a * blk;
    }
    out
}

/// `col{C, CA, ..., CA^{n-1}}`.
pub fn observability_matrix<T: Real>(a: &Mat<T>, cm: &Mat<T>) -> Mat<T> {
    controllability_matrix(&a.transpose(), &cm.transpose()).transpose()
}

fn complex_rank<T: Real>(m: &DMatrix<Complex<T>>, rel_tol: T) -> usize {
    let s = m.clone().svd(false, false).singular_values;
    let smax = s.iter().fold(T::zero(), |acc, &x| acc.max(x));
    if smax == T::zero() {
        return 0;
    }
    s.iter().filter(|&&x| x > rel_tol * smax).count()
}

/// Hautus test restricted to eigenvalues on or outside the unit circle.
fn pbh_unstable_modes_ok<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Result<bool> {
    let n = a.nrows();
    let schur = a
        .clone()
        .try_schur(T::default_epsilon(), 100_000)
        .ok_or_else(|| Error::Numeric("Schur iteration did not converge".into()))?;
    let tol: T = c(RANK_TOL);
    for lam in schur.complex_eigenvalues().iter() {
        if (lam.re * lam.re + lam.im * lam.im).sqrt() < T::one() - tol {
            continue;
        }
        let mut m = DMatrix::<Complex<T>>::zeros(n, n + b.ncols());
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = Complex::new(a[(i, j)], T::zero());
            }
            m[(i, i)] -= *lam;
            for j in 0..b.ncols() {
                m[(i, n + j)] = Complex::new(b[(i, j)], T::zero());
            }
        }
        if complex_rank(&m, tol) < n {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StructuralCheck {
    pub stabilizable: bool,
    pub detectable: bool,
    /// Rank of `[√Qw, A√Qw, ..., A^{n-1}√Qw]`.
    pub controllability_rank: usize,
    /// Rank of `col{C, CA, ..., CA^{n-1}}`.
    pub observability_rank: usize,
}

impl StructuralCheck {
    pub fn holds(&self) -> bool {
        self.stabilizable && self.detectable
    }
}

/// Stabilizability of `(A, √Qw)` and detectability of `(A, C_i)`.
pub fn structural_check<T: Real>(model: &SystemModel<T>, node: usize) -> Result<StructuralCheck> {
    let s = model.sensor(node)?;
    let sq = psd_sqrt(&model.qw);
    let tol: T = c(RANK_TOL);
    let controllability_rank = rank(&controllability_matrix(&model.a, &sq), tol);
    let observability_rank = rank(&observability_matrix(&model.a, &s.c), tol);
    let stabilizable = pbh_unstable_modes_ok(&model.a, &sq)?;
    let detectable = pbh_unstable_modes_ok(&model.a.transpose(), &s.c.transpose())?;
    Ok(StructuralCheck { stabilizable, detectable, controllability_rank, observability_rank })
}

/// True iff `(A, √Qw)` is stabilizable and `(A, C_i)` is detectable.
pub fn check_condition_78<T: Real>(model: &SystemModel<T>, node: usize) -> Result<bool> {
    Ok(structural_check(model, node)?.holds())
}

/// `A^k` cached by exponent.
pub fn powers<T: Real>(a: &Mat<T>, max_k: usize) -> Vec<Mat<T>> {
    (0..=max_k).map(|k| mat_pow(a, k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::from_rows;
    use crate::sim_harness::scenarios;

    #[test]
    fn example2_model_passes() {
        let sc = scenarios::example2::<f64>().unwrap();
        let r = validate_model(&sc.model);
        assert!(r.passed(), "{:?}", r.failures());
        assert_eq!(validate_model(&sc.model), r);
    }

    #[test]
    fn negative_qw_fails() {
        let mut sc = scenarios::example1::<f64>(0.5).unwrap();
        sc.model.qw = -DMatrix::<f64>::identity(2, 2);
        let r = validate_model(&sc.model);
        assert!(!r.passed());
        assert!(r.failures().iter().any(|c| c.name.contains("semidefinite") && c.detail.contains("-1")));
    }

    #[test]
    fn scalar_state_fails() {
        let m = SystemModel::<f64> {
            a: from_rows(&[&[0.5]]),
            qw: from_rows(&[&[1.0]]),
            sensors: vec![SensorModel { id: 1, c: from_rows(&[&[1.0]]), qv: from_rows(&[&[1.0]]) }],
        };
        let r = validate_model(&m);
        assert!(r.failures().iter().any(|c| c.name == "state dimension > 1"));
    }

    #[test]
    fn example1_structure() {
        let sc = scenarios::example1::<f64>(0.5).unwrap();
        let s = structural_check(&sc.model, 0).unwrap();
        assert_eq!(s.controllability_rank, 2);
        assert_eq!(s.observability_rank, 2);
        assert!(s.holds());
    }

    #[test]
    fn example2_structure() {
        let sc = scenarios::example2::<f64>().unwrap();
        for node in 0..2 {
            let s = structural_check(&sc.model, node).unwrap();
            assert_eq!(s.controllability_rank, 4);
            assert_eq!(s.observability_rank, 4);
            assert!(check_condition_78(&sc.model, node).unwrap());
        }
    }

    #[test]
    fn unobservable_unstable_mode() {
        let m = SystemModel::<f64> {
            a: from_rows(&[&[2.0, 0.0], &[0.0, 0.5]]),
            qw: from_rows(&[&[0.0, 0.0], &[0.0, 1.0]]),
            sensors: vec![SensorModel { id: 1, c: from_rows(&[&[0.0, 1.0]]), qv: from_rows(&[&[1.0]]) }],
        };
        assert!(!check_condition_78(&m, 0).unwrap());
    }
}
