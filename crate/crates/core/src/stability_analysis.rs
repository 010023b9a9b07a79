//! Mean-square stability of the compensating estimates: the augmented error
//! system, its moment operator, an exact spectral test, LMI certificates,
//! the no-delay conditions and the probability search.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::linalg::{c, f, hadamard, kron, lambda_max, lambda_min, mat_pow, spectral_radius, sym, Mat, Real};
use crate::local_estimation::default_steady;
use crate::model_core::SystemModel;
use crate::reduction_channel::{build_scheme, SelectionScheme};
use crate::{Error, Result};

/// Mean augmented matrix and mask moments of one node at steady state.
#[derive(Clone, Debug)]
pub struct AugmentedSystem<T: Real> {
    pub node: usize,
    pub d: usize,
    pub a: Mat<T>,
    pub ad: Mat<T>,
    pub hbar: Mat<T>,
    pub lambda: Mat<T>,
    pub v: Mat<T>,
    pub w: Mat<T>,
    pub phik: Mat<T>,
    pub gk: Mat<T>,
    pub k: Mat<T>,
    /// `E{A_i(t)}`, `2n x 2n`.
    pub abar: Mat<T>,
    masks: Vec<Mat<T>>,
    probs: Vec<T>,
}

impl<T: Real> AugmentedSystem<T> {
    pub fn new(model: &SystemModel<T>, scheme: &SelectionScheme<T>, d: usize) -> Result<Self> {
        let sf = default_steady(model, scheme.node)?;
        Ok(Self::with_filter(model, scheme, d, sf.phik, sf.gk, sf.k))
    }

    pub fn with_filter(model: &SystemModel<T>, scheme: &SelectionScheme<T>, d: usize, phik: Mat<T>, gk: Mat<T>, k: Mat<T>) -> Self {
        let n = model.n();
        let ad = mat_pow(&model.a, d);
        let mut sys = AugmentedSystem {
            node: scheme.node,
            d,
            a: model.a.clone(),
            ad,
            hbar: scheme.hbar.clone(),
            lambda: scheme.lambda.clone(),
            v: scheme.v.clone(),
            w: scheme.w.clone(),
            phik,
            gk,
            k,
            abar: DMatrix::zeros(2 * n, 2 * n),
            masks: scheme.masks.clone(),
            probs: scheme.probs.clone(),
        };
        sys.abar = sys.realization(&sys.hbar.clone());
        sys
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// `A_i(t)` for a given mask (or its mean).
    pub fn realization(&self, h: &Mat<T>) -> Mat<T> {
        let n = self.n();
        let eye = DMatrix::<T>::identity(n, n);
        let mut m = DMatrix::zeros(2 * n, 2 * n);
        m.view_mut((0, 0), (n, n)).copy_from(&(&self.ad * (&eye - h) * &self.a));
        m.view_mut((0, n), (n, n)).copy_from(&(&self.ad * h * &self.phik));
        m.view_mut((n, n), (n, n)).copy_from(&mat_pow(&self.phik, self.d + 1));
        m
    }

    pub fn masks(&self) -> &[Mat<T>] {
        &self.masks
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }
}

fn blocks<T: Real>(b: &Mat<T>, n: usize) -> [Mat<T>; 4] {
    [
        b.view((0, 0), (n, n)).into_owned(),
        b.view((0, n), (n, n)).into_owned(),
        b.view((n, 0), (n, n)).into_owned(),
        b.view((n, n), (n, n)).into_owned(),
    ]
}

fn join<T: Real>(b: [Mat<T>; 4], n: usize) -> Mat<T> {
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    m.view_mut((0, 0), (n, n)).copy_from(&b[0]);
    m.view_mut((0, n), (n, n)).copy_from(&b[1]);
    m.view_mut((n, 0), (n, n)).copy_from(&b[2]);
    m.view_mut((n, n), (n, n)).copy_from(&b[3]);
    m
}

/// `f(B) = E{A_i(t)^T B A_i(t)}` from the mask moments.
pub fn f_operator<T: Real>(sys: &AugmentedSystem<T>, b: &Mat<T>) -> Mat<T> {
    let n = sys.n();
    let [b11, b12, b21, b22] = blocks(b, n);
    let a = &sys.a;
    let ad = &sys.ad;
    let phi = &sys.phik;
    let phid = mat_pow(phi, sys.d + 1);
    let eye = DMatrix::<T>::identity(n, n);
    let g = &eye - &sys.hbar;
    let m = ad.transpose() * &b11 * ad;
    let t11 = a.transpose() * hadamard(&sys.w, &m) * a;
    let t12 = a.transpose() * hadamard(&sys.v.transpose(), &m) * phi + a.transpose() * &g * ad.transpose() * &b12 * &phid;
    let t21 = phi.transpose() * hadamard(&sys.v, &m) * a + phid.transpose() * &b21 * ad * &g * a;
    let t22 = phi.transpose() * hadamard(&sys.lambda, &m) * phi
        + phid.transpose() * &b21 * ad * &sys.hbar * phi
        + phid.transpose() * &b22 * &phid
        + phi.transpose() * &sys.hbar * ad.transpose() * &b12 * &phid;
    join([t11, t12, t21, t22], n)
}

/// `E{A_i(t) X A_i(t)^T}`, the second-moment propagation, by summing over masks.
pub fn moment_propagation<T: Real>(sys: &AugmentedSystem<T>, x: &Mat<T>) -> Mat<T> {
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    for (h, &p) in sys.masks.iter().zip(&sys.probs) {
        if p > T::zero() {
            let ai = sys.realization(h);
            out += (&ai * x * ai.transpose()) * p;
        }
    }
    out
}

/// Matrix of `vec(X) -> vec(E{A X A^T})` in column-major vectorization.
pub fn propagation_matrix<T: Real>(sys: &AugmentedSystem<T>) -> Mat<T> {
    let m = 2 * sys.n();
    let mut g = DMatrix::zeros(m * m, m * m);
    for (h, &p) in sys.masks.iter().zip(&sys.probs) {
        if p > T::zero() {
            let ai = sys.realization(h);
            g += kron(&ai, &ai) * p;
        }
    }
    g
}

/// Matrix of `vec(B) -> vec(f(B))`, assembled column by column from [`f_operator`].
pub fn f_matrix<T: Real>(sys: &AugmentedSystem<T>) -> Mat<T> {
    let m = 2 * sys.n();
    let mut out = DMatrix::zeros(m * m, m * m);
    for col in 0..m * m {
        let mut e = DMatrix::zeros(m, m);
        e[(col % m, col / m)] = T::one();
        let fe = f_operator(sys, &e);
        out.column_mut(col).copy_from(&DMatrix::from_column_slice(m * m, 1, fe.as_slice()).column(0));
    }
    out
}

/// Spectral radius of the delay-lifted second-moment recursion
/// `Ξ(t+1) = E{A Ξ(t-d) A^T}` written in companion form.
pub fn exact_ms_test<T: Real>(sys: &AugmentedSystem<T>) -> Result<T> {
    let g = propagation_matrix(sys);
    let m = g.nrows();
    let d = sys.d;
    let mut comp = DMatrix::zeros(m * (d + 1), m * (d + 1));
    comp.view_mut((0, d * m), (m, m)).copy_from(&g);
    for k in 1..=d {
        comp.view_mut((k * m, (k - 1) * m), (m, m)).fill_with_identity();
    }
    spectral_radius(&comp)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LmiVerdict {
    Feasible,
    /// The exact mean-square radius is at least one, so no certificate exists.
    Infeasible,
    /// Search budget exhausted; proves nothing.
    Unknown,
}

#[derive(Clone, Debug)]
pub struct LmiCertificate<T: Real> {
    pub node: usize,
    pub d_mat: Mat<T>,
    pub x: Mat<T>,
    pub y: Mat<T>,
    pub z: Mat<T>,
    pub s: Mat<T>,
    pub verdict: LmiVerdict,
    /// `-λ_max(M)` after scaling `λ_max(D) = 1`.
    pub margin: T,
}

impl<T: Real> LmiCertificate<T> {
    pub fn feasible(&self) -> bool {
        self.verdict == LmiVerdict::Feasible
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LmiOptions {
    pub restarts: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Required `-λ_max(M)` for a certificate.
    pub floor: f64,
}

impl Default for LmiOptions {
    fn default() -> Self {
        LmiOptions { restarts: 32, iterations: 50_000, seed: 7, floor: 1e-6 }
    }
}

/// The block matrix `M_i` of the delayed LMI, symmetrized.
pub fn lmi_matrix<T: Real>(sys: &AugmentedSystem<T>, dm: &Mat<T>, x: &Mat<T>, y: &Mat<T>, z: &Mat<T>, s: &Mat<T>) -> Mat<T> {
    let m = dm.nrows();
    let dd: T = c(sys.d as f64);
    let m11 = -dm + x + y.transpose() + y + z * dd + s;
    let m12 = -y - (z * &sys.abar) * dd;
    let m21 = -y.transpose() - (sys.abar.transpose() * z) * dd;
    let m22 = f_operator(sys, dm) + f_operator(sys, z) * dd - s;
    let mut big = DMatrix::zeros(2 * m, 2 * m);
    big.view_mut((0, 0), (m, m)).copy_from(&m11);
    big.view_mut((0, m), (m, m)).copy_from(&m12);
    big.view_mut((m, 0), (m, m)).copy_from(&m21);
    big.view_mut((m, m), (m, m)).copy_from(&m22);
    sym(&big)
}

/// Checks a certificate from scratch: `(λ_min([X Y; Y^T Z]), λ_max(M), λ_min(D), λ_min(S))`.
pub fn verify_certificate<T: Real>(sys: &AugmentedSystem<T>, cert: &LmiCertificate<T>) -> (T, T, T, T) {
    let m = cert.x.nrows();
    let mut xyz = DMatrix::zeros(2 * m, 2 * m);
    xyz.view_mut((0, 0), (m, m)).copy_from(&cert.x);
    xyz.view_mut((0, m), (m, m)).copy_from(&cert.y);
    xyz.view_mut((m, 0), (m, m)).copy_from(&cert.y.transpose());
    xyz.view_mut((m, m), (m, m)).copy_from(&cert.z);
    let mm = lmi_matrix(sys, &cert.d_mat, &cert.x, &cert.y, &cert.z, &cert.s);
    (lambda_min(&sym(&xyz)), lambda_max(&mm), lambda_min(&cert.d_mat), lambda_min(&cert.s))
}

fn certificate_from_d<T: Real>(sys: &AugmentedSystem<T>, dm: &Mat<T>, floor: f64) -> Option<LmiCertificate<T>> {
    let scale = lambda_max(dm);
    if !(scale > T::zero()) || !scale.is_finite() {
        return None;
    }
    let dm = sym(&(dm / scale));
    let fd = sym(&f_operator(sys, &dm));
    let s = sym(&((&dm + &fd) * c::<T>(0.5)));
    let m = dm.nrows();
    let zero = DMatrix::zeros(m, m);
    let mut cert = LmiCertificate {
        node: sys.node,
        d_mat: dm,
        x: zero.clone(),
        y: zero.clone(),
        z: zero,
        s,
        verdict: LmiVerdict::Unknown,
        margin: T::zero(),
    };
    let (lxyz, lm, ld, ls) = verify_certificate(sys, &cert);
    cert.margin = -lm;
    let tol: T = c(floor);
    if lxyz >= c(-1e-9) && lm < -tol && ld > T::zero() && ls > T::zero() {
        cert.verdict = LmiVerdict::Feasible;
        Some(cert)
    } else {
        None
    }
}

/// Candidate `D` solving `D = f(D) + I` through the vectorized operator.
fn lyapunov_candidate<T: Real>(sys: &AugmentedSystem<T>) -> Option<Mat<T>> {
    let fm = f_matrix(sys);
    let k = fm.nrows();
    let m = 2 * sys.n();
    let lhs = DMatrix::<T>::identity(k, k) - fm;
    let eye = DMatrix::<T>::identity(m, m);
    let rhs = DMatrix::from_column_slice(k, 1, eye.as_slice());
    let sol = lhs.lu().solve(&rhs)?;
    let dm = sym(&DMatrix::from_column_slice(m, m, sol.as_slice()));
    if lambda_min(&dm) > T::zero() {
        Some(dm)
    } else {
        None
    }
}

/// Projected subgradient descent on `λ_max(f(D) - D)` over `D ⪰ εI`, `tr D = 1`.
fn subgradient_search<T: Real>(sys: &AugmentedSystem<T>, opts: &LmiOptions) -> Option<Mat<T>> {
    let m = 2 * sys.n();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (sys.node as u64).wrapping_mul(0x9e37_79b9));
    let eps: T = c(1e-6);
    let project = |d: &Mat<T>| -> Mat<T> {
        let e = sym(d).symmetric_eigen();
        let vals = e.eigenvalues.map(|v| v.max(eps));
        let p = &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose();
        let tr = p.trace();
        p / tr
    };
    let objective = |d: &Mat<T>| -> (T, Mat<T>) {
        let gap = sym(&(f_operator(sys, d) - d));
        let e = gap.symmetric_eigen();
        let (idx, _) = e.eigenvalues.iter().enumerate().fold((0, e.eigenvalues[0]), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        let u = e.eigenvectors.column(idx).into_owned();
        let uu = &u * u.transpose();
        (e.eigenvalues[idx], sym(&(moment_propagation(sys, &uu) - uu)))
    };
    for r in 0..opts.restarts.max(1) {
        let mut d = if r == 0 {
            DMatrix::identity(m, m)
        } else {
            let b = DMatrix::from_fn(m, m, |_, _| c::<T>(rng.gen_range(-1.0..1.0)));
            &b * b.transpose() + DMatrix::identity(m, m) * c::<T>(0.1)
        };
        d = project(&d);
        let mut best: T = c(f64::MAX);
        let mut stale = 0usize;
        for it in 0..opts.iterations {
            let (val, grad) = objective(&d);
            if val < -c::<T>(opts.floor) * c(0.1) {
                return Some(d);
            }
            if val < best - c(1e-12) {
                best = val;
                stale = 0;
            } else {
                stale += 1;
                if stale > 2_000 {
                    break;
                }
            }
            let gn = grad.norm();
            if gn == T::zero() {
                break;
            }
            let step: T = c::<T>(0.05) / (c::<T>(1.0) + c::<T>(it as f64).sqrt());
            d = project(&(d - grad * (step / gn)));
        }
    }
    None
}

/// Searches for a certificate of the delay-dependent LMIs. The first attempt
/// solves `D = f(D) + I` and takes `X = Y = Z = 0`, `S = (D + f(D)) / 2`;
/// subgradient search with random restarts runs when that fails.
pub fn lmi_feasibility<T: Real>(sys: &AugmentedSystem<T>, opts: &LmiOptions) -> LmiCertificate<T> {
    if let Some(cert) = lyapunov_candidate(sys).and_then(|d| certificate_from_d(sys, &d, opts.floor)) {
        return cert;
    }
    let hopeless = matches!(exact_ms_test(sys), Ok(r) if r >= T::one());
    if !hopeless {
        if let Some(cert) = subgradient_search(sys, opts).and_then(|d| certificate_from_d(sys, &d, opts.floor)) {
            return cert;
        }
    }
    let m = 2 * sys.n();
    let z = DMatrix::zeros(m, m);
    LmiCertificate {
        node: sys.node,
        d_mat: DMatrix::identity(m, m),
        x: z.clone(),
        y: z.clone(),
        z: z.clone(),
        s: z,
        verdict: if hopeless { LmiVerdict::Infeasible } else { LmiVerdict::Unknown },
        margin: -lambda_max(&sym(&(f_operator(sys, &DMatrix::identity(m, m)) - DMatrix::identity(m, m)))),
    }
}

/// `λ_max(f̂(D) - D)` for a given `D` in the no-delay system.
pub fn a105_gap<T: Real>(sys: &AugmentedSystem<T>, dm: &Mat<T>) -> T {
    lambda_max(&sym(&(f_operator(sys, dm) - dm)))
}

#[derive(Clone, Debug)]
pub struct A105B105<T: Real> {
    pub a105: bool,
    pub b105: bool,
    /// `λ_max(A^T (I - H) A)`.
    pub lambda_b105: T,
}

/// The two no-delay conditions for one node.
pub fn check_a105_b105<T: Real>(model: &SystemModel<T>, scheme: &SelectionScheme<T>, opts: &LmiOptions) -> Result<A105B105<T>> {
    let sys = AugmentedSystem::new(model, scheme, 0)?;
    let cert = lmi_feasibility(&sys, opts);
    let n = model.n();
    let m = model.a.transpose() * (DMatrix::identity(n, n) - &scheme.hbar) * &model.a;
    let lam = lambda_max(&sym(&m));
    Ok(A105B105 { a105: cert.feasible(), b105: lam < T::one(), lambda_b105: lam })
}

/// `ρ(A^d (I - H) A)`.
pub fn rho_106<T: Real>(model: &SystemModel<T>, scheme: &SelectionScheme<T>, d: usize) -> Result<T> {
    let n = model.n();
    spectral_radius(&(mat_pow(&model.a, d) * (DMatrix::identity(n, n) - &scheme.hbar) * &model.a))
}

#[derive(Clone, Debug)]
pub struct NodeStability<T: Real> {
    pub node: usize,
    pub d: usize,
    pub lmi: LmiCertificate<T>,
    pub exact_ms_radius: T,
    pub cond_a105: bool,
    pub cond_b105: bool,
    pub lambda_b105: T,
    pub cond_106: bool,
    pub rho_106: T,
}

#[derive(Clone, Debug)]
pub struct StabilityReport<T: Real> {
    pub nodes: Vec<NodeStability<T>>,
    pub overall_theorem3: bool,
}

impl<T: Real> StabilityReport<T> {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("node,delay,lmi,lmi_margin,exact_ms_radius,a105,b105,lambda_b105,cond106,rho106\n");
        for r in &self.nodes {
            let _ = writeln!(
                s,
                "{},{},{},{:.6e},{:.6},{},{},{:.6},{},{:.6}",
                r.node + 1,
                r.d,
                match r.lmi.verdict {
                    LmiVerdict::Feasible => "feasible",
                    LmiVerdict::Infeasible => "infeasible",
                    LmiVerdict::Unknown => "unknown",
                },
                f(r.lmi.margin),
                f(r.exact_ms_radius),
                r.cond_a105,
                r.cond_b105,
                f(r.lambda_b105),
                r.cond_106,
                f(r.rho_106)
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.nodes {
            let _ = writeln!(
                s,
                "node {} (d = {}): LMI {} (margin {:.3e}), mean-square radius {:.4}, rho(A^d(I-H)A) = {:.4} [{}]",
                r.node + 1,
                r.d,
                match r.lmi.verdict {
                    LmiVerdict::Feasible => "feasible",
                    LmiVerdict::Infeasible => "infeasible",
                    LmiVerdict::Unknown => "unknown",
                },
                f(r.lmi.margin),
                f(r.exact_ms_radius),
                f(r.rho_106),
                if r.cond_106 { "ok" } else { "violated" }
            );
        }
        let _ = writeln!(s, "steady-state fusion: {}", if self.overall_theorem3 { "stable" } else { "not certified" });
        s
    }
}

pub fn check_theorem3<T: Real>(
    model: &SystemModel<T>,
    schemes: &[SelectionScheme<T>],
    delays: &[usize],
    opts: &LmiOptions,
) -> Result<StabilityReport<T>> {
    if schemes.len() != model.num_nodes() || delays.len() != model.num_nodes() {
        return Err(Error::Contract("one scheme and one delay per node required".into()));
    }
    let nodes = (0..model.num_nodes())
        .into_par_iter()
        .map(|i| -> Result<NodeStability<T>> {
            let d = delays[i];
            let sys = AugmentedSystem::new(model, &schemes[i], d)?;
            let lmi = lmi_feasibility(&sys, opts);
            let radius = exact_ms_test(&sys)?;
            let ab = check_a105_b105(model, &schemes[i], opts)?;
            let rho = rho_106(model, &schemes[i], d)?;
            Ok(NodeStability {
                node: i,
                d,
                lmi,
                exact_ms_radius: radius,
                cond_a105: ab.a105,
                cond_b105: ab.b105,
                lambda_b105: ab.lambda_b105,
                cond_106: rho < T::one(),
                rho_106: rho,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let overall = nodes.iter().all(|r| r.lmi.feasible() && r.cond_106);
    Ok(StabilityReport { nodes, overall_theorem3: overall })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Criterion {
    /// LMIs only: bounded fused error.
    C1,
    /// LMIs and the spectral condition: a steady-state fusion exists.
    C2,
}

#[derive(Clone, Debug)]
pub struct Candidate<T: Real> {
    pub node: usize,
    pub probs: Vec<T>,
    /// LMI margin, capped by `1 - ρ(A^d(I-H)A)` under C2.
    pub margin: T,
    pub rho_106: T,
    /// On the search grid (as opposed to found by refinement).
    pub on_grid: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct SearchOptions {
    pub step: f64,
    pub refine_rounds: usize,
    pub seed: u64,
    pub lmi: LmiOptions,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions { step: 0.1, refine_rounds: 40, seed: 11, lmi: LmiOptions { restarts: 2, iterations: 2_000, ..LmiOptions::default() } }
    }
}

fn simplex_grid(k: usize, steps: usize) -> Vec<Vec<usize>> {
    fn rec(k: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == 1 {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for a in 0..=left {
            cur.push(a);
            rec(k - 1, left - a, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(k, steps, &mut Vec::new(), &mut out);
    out
}

fn score<T: Real>(model: &SystemModel<T>, node: usize, r: usize, d: usize, probs: &[T], criterion: Criterion, opts: &LmiOptions) -> Option<(T, T)> {
    let scheme = build_scheme(node, model.n(), r, probs).ok()?;
    let sys = AugmentedSystem::new(model, &scheme, d).ok()?;
    let cert = lmi_feasibility(&sys, opts);
    let rho = rho_106(model, &scheme, d).ok()?;
    if !cert.feasible() {
        return None;
    }
    match criterion {
        Criterion::C1 => Some((cert.margin, rho)),
        Criterion::C2 if rho < T::one() => Some((cert.margin.min(T::one() - rho), rho)),
        Criterion::C2 => None,
    }
}

/// Feasible probability vectors for one node, best margin first: a simplex
/// grid, then random local refinement around the best grid points.
pub fn select_probabilities<T: Real>(
    model: &SystemModel<T>,
    node: usize,
    r: usize,
    d: usize,
    criterion: Criterion,
    opts: &SearchOptions,
) -> Result<Vec<Candidate<T>>> {
    let n = model.n();
    let delta = crate::linalg::binomial(n, r);
    if r == 0 || r > n {
        return Err(Error::Contract(format!("need 1 <= r <= n, got r = {r}")));
    }
    if r == n {
        let sys = AugmentedSystem::new(model, &SelectionScheme::full_transmission(node, n), d)?;
        let cert = lmi_feasibility(&sys, &opts.lmi);
        return Ok(if cert.feasible() {
            vec![Candidate { node, probs: vec![T::one()], margin: cert.margin, rho_106: T::zero(), on_grid: true }]
        } else {
            Vec::new()
        });
    }
    let steps = (1.0 / opts.step).round() as usize;
    let grid = simplex_grid(delta, steps.max(1));
    let mut found: Vec<Candidate<T>> = grid
        .par_iter()
        .filter_map(|g| {
            let probs: Vec<T> = g.iter().map(|&k| c(k as f64 / steps as f64)).collect();
            score(model, node, r, d, &probs, criterion, &opts.lmi)
                .map(|(margin, rho)| Candidate { node, probs, margin, rho_106: rho, on_grid: true })
        })
        .collect();
    found.sort_by(|a, b| b.margin.partial_cmp(&a.margin).unwrap_or(std::cmp::Ordering::Equal));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(node as u64));
    let seeds: Vec<Candidate<T>> = found.iter().take(3).cloned().collect();
    for s in seeds {
        let mut cur = s.clone();
        let mut radius = opts.step / 2.0;
        for _ in 0..opts.refine_rounds {
            let mut p: Vec<f64> = cur.probs.iter().map(|&x| f(x) + rng.gen_range(-radius..radius)).collect();
            p.iter_mut().for_each(|x| *x = x.max(0.0));
            let tot: f64 = p.iter().sum();
            if tot <= 0.0 {
                continue;
            }
            let probs: Vec<T> = p.iter().map(|&x| c(x / tot)).collect();
            match score(model, node, r, d, &probs, criterion, &opts.lmi) {
                Some((margin, rho)) if margin > cur.margin => {
                    cur = Candidate { node, probs, margin, rho_106: rho, on_grid: false };
                }
                _ => radius *= 0.9,
            }
        }
        if !cur.on_grid {
            found.push(cur);
        }
    }
    found.sort_by(|a, b| b.margin.partial_cmp(&a.margin).unwrap_or(std::cmp::Ordering::Equal));
    Ok(found)
}

#[cfg(test)]
mod tests;
