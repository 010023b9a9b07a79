//! Scalar trait and the handful of dense-matrix helpers shared by every module.

use nalgebra::{DMatrix, DVector, RealField};
use num_traits::{FromPrimitive, ToPrimitive};

use crate::{Error, Result};

/// Floating-point scalar the numerical core is generic over.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive {}

impl Real for f32 {}
impl Real for f64 {}

pub type Mat<T> = DMatrix<T>;
pub type Vec_<T> = DVector<T>;

#[inline]
pub fn c<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("scalar conversion")
}

#[inline]
pub fn f<T: Real>(x: T) -> f64 {
    x.to_f64().expect("scalar conversion")
}

pub fn sym<T: Real>(m: &Mat<T>) -> Mat<T> {
    (m + m.transpose()) * c::<T>(0.5)
}

/// Entrywise (Hadamard) product.
pub fn hadamard<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    a.component_mul(b)
}

/// Outer product of the diagonals of two diagonal matrices: `(U ⊙ B)[k][l] = u_k b_l`.
pub fn odot<T: Real>(u: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>> {
    let n = u.nrows();
    if !u.is_square() || !b.is_square() || b.nrows() != n {
        return Err(Error::Contract("odot needs two square matrices of equal size".into()));
    }
    for m in [u, b] {
        for i in 0..n {
            for j in 0..n {
                if i != j && m[(i, j)] != T::zero() {
                    return Err(Error::Contract("odot needs diagonal inputs".into()));
                }
            }
        }
    }
    Ok(DMatrix::from_fn(n, n, |k, l| u[(k, k)] * b[(l, l)]))
}

pub fn mat_pow<T: Real>(a: &Mat<T>, k: usize) -> Mat<T> {
    let mut r = DMatrix::identity(a.nrows(), a.ncols());
    for _ in 0..k {
        r = &r * a;
    }
    r
}

/// Spectral radius from the real Schur form.
pub fn spectral_radius<T: Real>(a: &Mat<T>) -> Result<T> {
    if a.nrows() == 0 {
        return Ok(T::zero());
    }
    let schur = a
        .clone()
        .try_schur(T::default_epsilon(), 100_000)
        .ok_or_else(|| Error::Numeric("Schur iteration did not converge".into()))?;
    let ev = schur.complex_eigenvalues();
    Ok(ev.iter().fold(T::zero(), |m, z| m.max((z.re * z.re + z.im * z.im).sqrt())))
}

pub fn sym_eigenvalues<T: Real>(a: &Mat<T>) -> DVector<T> {
    nalgebra::SymmetricEigen::new(sym(a)).eigenvalues
}

pub fn lambda_max<T: Real>(a: &Mat<T>) -> T {
    sym_eigenvalues(a).iter().fold(T::min_value().unwrap(), |m, &x| m.max(x))
}

pub fn lambda_min<T: Real>(a: &Mat<T>) -> T {
    sym_eigenvalues(a).iter().fold(T::max_value().unwrap(), |m, &x| m.min(x))
}

/// Symmetric PSD square root with negative eigenvalues clamped to zero.
pub fn psd_sqrt<T: Real>(a: &Mat<T>) -> Mat<T> {
    let e = nalgebra::SymmetricEigen::new(sym(a));
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|x| x.max(T::zero()).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Numerical rank: singular values below `rel_tol * sigma_max` count as zero.
pub fn rank<T: Real>(a: &Mat<T>, rel_tol: T) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let s = a.clone().svd(false, false).singular_values;
    let smax = s.iter().fold(T::zero(), |m, &x| m.max(x));
    if smax == T::zero() {
        return 0;
    }
    s.iter().filter(|&&x| x > rel_tol * smax).count()
}

pub fn spectral_norm<T: Real>(a: &Mat<T>) -> T {
    if a.nrows() == 0 || a.ncols() == 0 {
        return T::zero();
    }
    a.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(T::zero(), |m, &x| m.max(x))
}

pub fn max_abs<T: Real>(a: &Mat<T>) -> T {
    a.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
}

/// Inverse of a symmetric positive-definite matrix. Falls back to a small ridge
/// when the Cholesky factorization fails; the returned flag reports the fallback.
pub fn spd_inverse<T: Real>(a: &Mat<T>) -> Result<(Mat<T>, bool)> {
    let s = sym(a);
    if let Some(ch) = s.clone().cholesky() {
        return Ok((ch.inverse(), false));
    }
    let n = s.nrows();
    let ridge = c::<T>(1e-10) * (T::one() + max_abs(&s));
    let r = &s + DMatrix::identity(n, n) * ridge;
    r.cholesky()
        .map(|ch| (ch.inverse(), true))
        .ok_or_else(|| Error::Degenerate(format!("matrix not positive definite, min eigenvalue {}", f(lambda_min(&s)))))
}

/// Moore-Penrose inverse of a symmetric positive-semidefinite matrix,
/// dropping eigenvalues below `rel_tol * λ_max`. Returns the retained rank.
pub fn psd_pinv<T: Real>(a: &Mat<T>, rel_tol: T) -> (Mat<T>, usize) {
    let e = sym(a).symmetric_eigen();
    let top = e.eigenvalues.iter().fold(T::zero(), |m, &v| m.max(v));
    let cut = top * rel_tol;
    let mut rank = 0;
    let inv = e.eigenvalues.map(|v| {
        if v > cut {
            rank += 1;
            T::one() / v
        } else {
            T::zero()
        }
    });
    (&e.eigenvectors * DMatrix::from_diagonal(&inv) * e.eigenvectors.transpose(), rank)
}

pub fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

pub fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

pub fn binomial(n: usize, r: usize) -> usize {
    let r = r.min(n - r.min(n));
    (0..r).fold(1usize, |acc, k| acc * (n - k) / (k + 1))
}

/// Kronecker product, used only for vectorizing linear matrix maps.
pub fn kron<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    a.kronecker(b)
}

pub fn from_rows<T: Real>(rows: &[&[f64]]) -> Mat<T> {
    let r = rows.len();
    let cols = if r == 0 { 0 } else { rows[0].len() };
    DMatrix::from_fn(r, cols, |i, j| c(rows[i][j]))
}

pub fn cast<T: Real>(m: &DMatrix<f64>) -> Mat<T> {
    m.map(|x| c::<T>(x))
}

pub fn to_f64<T: Real>(m: &Mat<T>) -> DMatrix<f64> {
    m.map(|x| f(x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn odot_units() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        assert_eq!(odot(&i2, &i2).unwrap(), DMatrix::from_element(2, 2, 1.0));
        let u = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0]));
        assert_eq!(odot(&u, &b).unwrap(), from_rows::<f64>(&[&[0.0, 1.0], &[0.0, 0.0]]));
        assert!(odot(&from_rows::<f64>(&[&[1.0, 1.0], &[0.0, 1.0]]), &b).is_err());
    }

    #[test]
    fn lcm_and_binomial() {
        assert_eq!(lcm(2, 3), 6);
        assert_eq!(lcm(1, 4), 4);
        assert_eq!(binomial(4, 2), 6);
        assert_eq!(binomial(5, 2), 10);
        assert_eq!(binomial(2, 1), 2);
    }

    #[test]
    fn radius_of_rotation() {
        let a = from_rows::<f64>(&[&[0.0, -0.5], &[0.5, 0.0]]);
        assert!((spectral_radius(&a).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sqrt_roundtrip() {
        let a = from_rows::<f64>(&[&[4.0, 1.0], &[1.0, 3.0]]);
        let s = psd_sqrt(&a);
        assert!(max_abs(&(&s * &s - &a)) < 1e-12);
    }

    #[test]
    fn works_in_f32() {
        let a = from_rows::<f32>(&[&[2.0, 0.0], &[0.0, 0.5]]);
        assert!((spectral_radius(&a).unwrap() - 2.0).abs() < 1e-5);
        assert_eq!(rank(&a, 1e-6), 2);
    }
}
