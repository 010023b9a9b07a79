//! Exact second-moment bookkeeping for local errors, compensating-estimate
//! errors and process noise.
//!
//! Two evaluation routes share one memo table:
//!
//! * a direct recursion that expands the later of two errors by one
//!   compensation step (valid from time zero, start-up included);
//! * the closed lemma forms (correlation kernels, `Γ`, `Ψ`, `Υ`, diagonal and
//!   off-diagonal `Ξ` blocks), used once every referenced time is past the
//!   start-up ramp.
//!
//! Conventions. All nodes start from the same prior: `x̂_i(0) = m0`, error
//! `ε0 = x(0) - m0` with covariance `P0`, so `P_ij(0) = P0`. A compensating
//! estimate with `t < d_i` is the pure prediction `A^t m0`; at `t = d_i` the
//! components that were not transmitted fall back to `m0`.

use std::collections::{HashMap, VecDeque};

use nalgebra::DMatrix;

use crate::linalg::{c, f, hadamard, lambda_min, lcm, mat_pow, sym, Mat, Real};
use crate::local_estimation::{cross_update, riccati_step};
use crate::model_core::SystemModel;
use crate::reduction_channel::SelectionScheme;
use crate::{Error, Result};

pub type Time = i64;

/// Mean-mask constants of one node.
#[derive(Clone, Debug)]
pub struct NodeMoments<T: Real> {
    pub d: usize,
    pub hbar: Mat<T>,
    pub lambda: Mat<T>,
    pub v: Mat<T>,
    pub w: Mat<T>,
    /// `A^d H`.
    pub hd: Mat<T>,
    /// `A^d (I - H) A`.
    pub had: Mat<T>,
    /// `A^d - A^d H`.
    pub hbar_ad: Mat<T>,
}

impl<T: Real> NodeMoments<T> {
    pub fn new(a: &Mat<T>, scheme: &SelectionScheme<T>, d: usize) -> Self {
        let n = a.nrows();
        let ad = mat_pow(a, d);
        let hd = &ad * &scheme.hbar;
        let hbar_ad = &ad - &hd;
        let had = &ad * (DMatrix::identity(n, n) - &scheme.hbar) * a;
        NodeMoments {
            d,
            hbar: scheme.hbar.clone(),
            lambda: scheme.lambda.clone(),
            v: scheme.v.clone(),
            w: scheme.w.clone(),
            hd,
            had,
            hbar_ad,
        }
    }
}

/// Period constants of a node pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairPeriod {
    /// `lcm(d_i + 1, d_j + 1)`.
    pub tau: usize,
    pub tau_di: usize,
    pub tau_dj: usize,
    /// Smallest `η >= 1` with `η (d_j + 1) >= d_i`.
    pub eta: usize,
}

impl PairPeriod {
    pub fn new(di: usize, dj: usize) -> Result<Self> {
        let tau = lcm(di + 1, dj + 1);
        let mut eta = 1usize;
        while eta * (dj + 1) < di {
            eta += 1;
            if eta > 1_000_000 {
                return Err(Error::Numeric("η iteration cap reached".into()));
            }
        }
        Ok(PairPeriod { tau, tau_di: tau / (di + 1), tau_dj: tau / (dj + 1), eta })
    }
}

/// Number of applications of `t -> t - d - 1` needed to reach `t2` or below.
pub fn chi(d: usize, t1: Time, t2: Time) -> Result<usize> {
    let mut k = 0usize;
    let mut s = t1;
    while s > t2 {
        s -= d as Time + 1;
        k += 1;
        if k > 1_000_000 {
            return Err(Error::Numeric("χ iteration cap reached".into()));
        }
    }
    Ok(k)
}

#[inline]
fn fo(d: usize, k: usize, t: Time) -> Time {
    t - (k as Time) * (d as Time + 1)
}

#[derive(Clone, Debug)]
struct Hist<M> {
    base: Time,
    items: VecDeque<M>,
}

impl<M: Clone> Hist<M> {
    fn new(first: M) -> Self {
        Hist { base: 0, items: VecDeque::from(vec![first]) }
    }

    fn push(&mut self, m: M) {
        self.items.push_back(m);
    }

    fn get(&self, t: Time) -> Result<&M> {
        if t < self.base || t >= self.base + self.items.len() as Time {
            return Err(Error::Dependency(format!("time {t} outside stored window [{}, {})", self.base, self.base + self.items.len() as Time)));
        }
        Ok(&self.items[(t - self.base) as usize])
    }

    fn trim(&mut self, keep_from: Time) {
        while self.base < keep_from && self.items.len() > 1 {
            self.items.pop_front();
            self.base += 1;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Key {
    Gamma(usize, Time, usize, Time),
    Xi(usize, Time, usize, Time),
    ThetaW(usize, Time, Time),
    E0c(usize, Time),
}

impl Key {
    fn oldest(&self) -> Time {
        match *self {
            Key::Gamma(_, a, _, b) | Key::Xi(_, a, _, b) | Key::ThetaW(_, a, b) => a.min(b),
            Key::E0c(_, a) => a,
        }
    }
}

/// Which route fills the `Γ`, `Ψ` and `Ξ` blocks after start-up.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    Direct,
    Lemma,
}

/// Blocks recorded at one tick for export.
#[derive(Clone, Debug)]
pub struct TickBlocks<T: Real> {
    pub t: usize,
    pub xi: Vec<Vec<Mat<T>>>,
    pub gamma: Vec<Vec<Mat<T>>>,
    pub psi: Vec<Vec<Mat<T>>>,
}

#[derive(Clone, Debug)]
pub struct CovarianceLedger<T: Real> {
    pub model: SystemModel<T>,
    pub nodes: Vec<NodeMoments<T>>,
    pub p0: Mat<T>,
    pub route: Route,
    apow: Vec<Mat<T>>,
    t: Time,
    pii: Vec<Hist<Mat<T>>>,
    pij: Vec<Vec<Option<Hist<Mat<T>>>>>,
    gk: Vec<Hist<Mat<T>>>,
    phik: Vec<Hist<Mat<T>>>,
    e0x: Vec<Hist<Mat<T>>>,
    memo: HashMap<Key, Mat<T>>,
    window: Time,
    warm: Time,
    pub record: bool,
    pub records: Vec<TickBlocks<T>>,
}

impl<T: Real> CovarianceLedger<T> {
    pub fn new(model: &SystemModel<T>, schemes: &[SelectionScheme<T>], delays: &[usize], p0: &Mat<T>) -> Result<Self> {
        let l = model.num_nodes();
        if schemes.len() != l || delays.len() != l {
            return Err(Error::Contract(format!("{l} nodes but {} schemes and {} delays", schemes.len(), delays.len())));
        }
        let n = model.n();
        let nodes: Vec<NodeMoments<T>> = schemes.iter().zip(delays).map(|(s, &d)| NodeMoments::new(&model.a, s, d)).collect();
        let maxd = delays.iter().copied().max().unwrap_or(0);
        let mut max_tau = 1;
        let mut max_eta = 1;
        for &di in delays {
            for &dj in delays {
                let p = PairPeriod::new(di, dj)?;
                max_tau = max_tau.max(p.tau);
                max_eta = max_eta.max(p.eta);
            }
        }
        let span = (max_tau + (max_eta + 1) * (maxd + 1) + maxd + 2) as Time;
        let eye = DMatrix::<T>::identity(n, n);
        let mut pij = vec![vec![None; l]; l];
        for (i, row) in pij.iter_mut().enumerate() {
            for (j, slot) in row.iter_mut().enumerate() {
                if i < j {
                    *slot = Some(Hist::new(p0.clone()));
                }
            }
        }
        Ok(CovarianceLedger {
            model: model.clone(),
            nodes,
            p0: p0.clone(),
            route: Route::Lemma,
            apow: (0..=maxd + 2).map(|k| mat_pow(&model.a, k)).collect(),
            t: 0,
            pii: (0..l).map(|_| Hist::new(p0.clone())).collect(),
            pij,
            gk: (0..l).map(|_| Hist::new(eye.clone())).collect(),
            phik: (0..l).map(|_| Hist::new(model.a.clone())).collect(),
            e0x: (0..l).map(|_| Hist::new(p0.clone())).collect(),
            memo: HashMap::new(),
            window: 3 * span + 8,
            warm: 2 * span,
            record: false,
            records: Vec::new(),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n(&self) -> usize {
        self.model.n()
    }

    pub fn time(&self) -> usize {
        self.t as usize
    }

    pub fn period(&self, i: usize, j: usize) -> PairPeriod {
        PairPeriod::new(self.nodes[i].d, self.nodes[j].d).expect("period")
    }

    /// Largest pairwise `lcm(d_i + 1, d_j + 1)`.
    pub fn lcm_period(&self) -> usize {
        let mut p = 1;
        for a in &self.nodes {
            for b in &self.nodes {
                p = lcm(p, lcm(a.d + 1, b.d + 1));
            }
        }
        p
    }

    /// First tick from which the lemma route is used.
    pub fn warm_time(&self) -> usize {
        self.warm as usize
    }

    fn zero(&self) -> Mat<T> {
        DMatrix::zeros(self.n(), self.n())
    }

    fn ap(&self, k: usize) -> Mat<T> {
        if k < self.apow.len() {
            self.apow[k].clone()
        } else {
            mat_pow(&self.model.a, k)
        }
    }

    // ---------------------------------------------------------------
    // Local filter history.

    pub fn p_ij(&self, i: usize, j: usize, t: Time) -> Result<Mat<T>> {
        if i == j {
            return self.pii[i].get(t).cloned();
        }
        if i < j {
            self.pij[i][j].as_ref().unwrap().get(t).cloned()
        } else {
            Ok(self.pij[j][i].as_ref().unwrap().get(t)?.transpose())
        }
    }

    pub fn gk(&self, i: usize, t: Time) -> Result<Mat<T>> {
        self.gk[i].get(t).cloned()
    }

    pub fn phik(&self, i: usize, t: Time) -> Result<Mat<T>> {
        self.phik[i].get(t).cloned()
    }

    /// `Φ_K(t1) Φ_K(t1 - 1) ... Φ_K(t2 + 1)`, identity when `t1 <= t2`.
    pub fn prod_phi(&self, i: usize, t1: Time, t2: Time) -> Result<Mat<T>> {
        let mut m = DMatrix::identity(self.n(), self.n());
        let mut s = t1;
        while s > t2 {
            m = m * self.phik[i].get(s)?;
            s -= 1;
        }
        Ok(m)
    }

    // ---------------------------------------------------------------
    // Correlation kernels between local errors and process noise.

    /// `E{x̃_i(t1) x̃_j(t2)^T}`.
    pub fn phi_xx(&self, i: usize, t1: Time, j: usize, t2: Time) -> Result<Mat<T>> {
        if t1 >= t2 {
            Ok(self.prod_phi(i, t1, t2)? * self.p_ij(i, j, t2)?)
        } else {
            Ok(self.phi_xx(j, t2, i, t1)?.transpose())
        }
    }

    /// `E{x̃_i(t1) w(t2)^T}`: nonzero only for `0 <= t2 < t1`.
    pub fn phi_w(&self, i: usize, t1: Time, t2: Time) -> Result<Mat<T>> {
        if t1 <= t2 || t2 < 0 {
            return Ok(self.zero());
        }
        Ok(self.prod_phi(i, t1, t2 + 1)? * self.gk(i, t2 + 1)? * &self.model.qw)
    }

    /// `E{x̃_i(t1) F_w(g, t2)^T}` with `F_w(g, t) = Σ_{θ=1}^{g} A^{θ-1} w(t - θ)`.
    pub fn phi_f(&self, i: usize, t1: Time, g: usize, t2: Time) -> Result<Mat<T>> {
        let mut m = self.zero();
        for th in 1..=g {
            let s = t2 - th as Time;
            if s >= 0 && s < t1 {
                m += self.phi_w(i, t1, s)? * self.ap(th - 1).transpose();
            }
        }
        Ok(m)
    }

    /// `E{F_w(g, t1) w(t2)^T} = A^{t1-t2-1} Qw` when `1 <= t1 - t2 <= g`.
    pub fn phi_wf(&self, g: usize, t1: Time, t2: Time) -> Mat<T> {
        let lag = t1 - t2;
        if t2 >= 0 && lag >= 1 && lag <= g as Time {
            self.ap((lag - 1) as usize) * &self.model.qw
        } else {
            self.zero()
        }
    }

    /// `E{F_w(g1, t1) F_w(g2, t2)^T}`.
    pub fn ff(&self, g1: usize, t1: Time, g2: usize, t2: Time) -> Mat<T> {
        let mut m = self.zero();
        for th1 in 1..=g1 {
            let s = t1 - th1 as Time;
            let th2 = t2 - s;
            if s >= 0 && th2 >= 1 && th2 <= g2 as Time {
                m += self.ap(th1 - 1) * &self.model.qw * self.ap((th2 - 1) as usize).transpose();
            }
        }
        m
    }

    /// `E{x̃_i(t) ε0^T}`.
    pub fn e0x(&self, i: usize, t: Time) -> Result<Mat<T>> {
        self.e0x[i].get(t).cloned()
    }

    // ---------------------------------------------------------------
    // Direct recursion.

    /// `E{x̃^c_i(t) ε0^T}`.
    pub fn e0c(&mut self, i: usize, t: Time) -> Result<Mat<T>> {
        let key = Key::E0c(i, t);
        if let Some(m) = self.memo.get(&key) {
            return Ok(m.clone());
        }
        let nd = self.nodes[i].clone();
        let d = nd.d as Time;
        let m = if t < d {
            self.ap(t as usize) * &self.p0
        } else {
            let s = t - d - 1;
            let tail = if s >= 0 { &nd.had * self.e0c(i, s)? } else { &nd.hbar_ad * &self.p0 };
            &nd.hd * self.e0x(i, t - d)? + tail
        };
        self.memo.insert(key, m.clone());
        Ok(m)
    }

    /// `E{x̃^c_i(t1) w(t2)^T}`, by one-step expansion.
    pub fn theta_w(&mut self, i: usize, t1: Time, t2: Time) -> Result<Mat<T>> {
        if t2 < 0 || t2 >= t1 {
            return Ok(self.zero());
        }
        let key = Key::ThetaW(i, t1, t2);
        if let Some(m) = self.memo.get(&key) {
            return Ok(m.clone());
        }
        let nd = self.nodes[i].clone();
        let d = nd.d as Time;
        let m = if t1 < d {
            self.phi_wf(t1 as usize, t1, t2)
        } else {
            let s = t1 - d - 1;
            let mut m = &nd.hd * self.phi_w(i, t1 - d, t2)? + self.phi_wf(nd.d, t1, t2);
            if s >= 0 {
                m += &nd.had * self.theta_w(i, s, t2)?;
                if s == t2 {
                    m += &nd.hbar_ad * &self.model.qw;
                }
            }
            m
        };
        self.memo.insert(key, m.clone());
        Ok(m)
    }

    /// `E{x̃^c_i(t1) F_w(g, t2)^T}`.
    pub fn theta_f(&mut self, i: usize, t1: Time, g: usize, t2: Time) -> Result<Mat<T>> {
        let mut m = self.zero();
        for th in 1..=g {
            let s = t2 - th as Time;
            if s >= 0 && s < t1 {
                m += self.theta_w(i, t1, s)? * self.ap(th - 1).transpose();
            }
        }
        Ok(m)
    }

    /// `Γ_ij(t1, t2) = E{x̃_i(t1) x̃^c_j(t2)^T}` for any pair of times.
    pub fn gamma(&mut self, i: usize, t1: Time, j: usize, t2: Time) -> Result<Mat<T>> {
        if t1 > t2 {
            return Ok(self.prod_phi(i, t1, t2)? * self.gamma(i, t2, j, t2)?);
        }
        let key = Key::Gamma(i, t1, j, t2);
        if let Some(m) = self.memo.get(&key) {
            return Ok(m.clone());
        }
        let nj = self.nodes[j].clone();
        let d = nj.d as Time;
        let m = if t2 < d {
            self.e0x(i, t1)? * self.ap(t2 as usize).transpose() + self.phi_f(i, t1, t2 as usize, t2)?
        } else {
            let s = t2 - d - 1;
            let carry = if s >= 0 {
                self.gamma(i, t1, j, s)? * self.model.a.transpose() + self.phi_w(i, t1, s)?
            } else {
                self.e0x(i, t1)?
            };
            self.phi_xx(i, t1, j, t2 - d)? * nj.hd.transpose()
                + carry * nj.hbar_ad.transpose()
                + self.phi_f(i, t1, nj.d, t2)?
        };
        self.memo.insert(key, m.clone());
        Ok(m)
    }

    /// `E{x̃^c_i(t1) x̃^c_j(t2)^T}` for any pair of nodes and times.
    pub fn xi(&mut self, i: usize, t1: Time, j: usize, t2: Time) -> Result<Mat<T>> {
        if t1 < t2 || (t1 == t2 && i > j) {
            return Ok(self.xi(j, t2, i, t1)?.transpose());
        }
        let key = Key::Xi(i, t1, j, t2);
        if let Some(m) = self.memo.get(&key) {
            return Ok(m.clone());
        }
        let ni = self.nodes[i].clone();
        let d = ni.d as Time;
        let m = if t1 < d {
            let mut m = self.ap(t1 as usize) * self.e0c(j, t2)?.transpose();
            for th in 1..=t1 as usize {
                m += self.ap(th - 1) * self.theta_w(j, t2, t1 - th as Time)?.transpose();
            }
            m
        } else if i == j && t1 == t2 {
            self.xi_same_tick(i, t1)?
        } else {
            let s = t1 - d - 1;
            let mut m = &ni.hd * self.gamma(i, t1 - d, j, t2)?;
            if s >= 0 {
                m += &ni.had * self.xi(i, s, j, t2)? + &ni.hbar_ad * self.theta_w(j, t2, s)?.transpose();
            } else {
                m += &ni.hbar_ad * self.e0c(j, t2)?.transpose();
            }
            for th in 1..=ni.d {
                m += self.ap(th - 1) * self.theta_w(j, t2, t1 - th as Time)?.transpose();
            }
            m
        };
        self.memo.insert(key, m.clone());
        Ok(m)
    }

    /// Same node, same tick: the mask appears on both sides, so its second
    /// moments enter through entrywise products.
    fn xi_same_tick(&mut self, i: usize, t: Time) -> Result<Mat<T>> {
        let ni = self.nodes[i].clone();
        let d = ni.d as Time;
        let s = t - d - 1;
        let a = &self.model.a.clone();
        let pm = self.p_ij(i, i, t - d)?;
        let (cross, ss) = if s >= 0 {
            let cross = self.gamma(i, t - d, i, s)? * a.transpose() + self.phi_w(i, t - d, s)?;
            let ss = a * self.xi(i, s, i, s)? * a.transpose() + &self.model.qw;
            (cross, ss)
        } else {
            (self.e0x(i, t - d)?, self.p0.clone())
        };
        let inner = hadamard(&ni.lambda, &pm)
            + hadamard(&ni.v, &cross)
            + hadamard(&ni.v.transpose(), &cross.transpose())
            + hadamard(&ni.w, &ss);
        let ad = self.ap(ni.d);
        Ok(sym(&(&ad * inner * ad.transpose() + self.qw_tail(ni.d, 0))))
    }

    /// `Σ_{θ=1}^{g} A^{θ-1+shift} Qw (A^{θ-1+shift})^T`.
    fn qw_tail(&self, g: usize, shift: usize) -> Mat<T> {
        let mut m = self.zero();
        for th in 1..=g {
            let p = self.ap(th - 1 + shift);
            m += &p * &self.model.qw * p.transpose();
        }
        m
    }

    // ---------------------------------------------------------------
    // Lemma forms.

    /// Unrolled `E{x̃^c_i(t1) w(t2)^T}`: the sum over `ℏ < χ_i(t1, t2)` of
    /// `H_Ad^ℏ {H_d Φ^w(f^ℏ(t1) - d, t2) + δ H̄_Ad Qw + Φ^w_F(d, f^ℏ(t1), t2)}`.
    pub fn theta_w_unrolled(&mut self, i: usize, t1: Time, t2: Time) -> Result<Mat<T>> {
        if t2 < 0 || t2 >= t1 {
            return Ok(self.zero());
        }
        let ni = self.nodes[i].clone();
        let k = chi(ni.d, t1, t2)?;
        if fo(ni.d, k - 1, t1) < ni.d as Time {
            return self.theta_w(i, t1, t2);
        }
        let mut m = self.zero();
        let mut pw = DMatrix::identity(self.n(), self.n());
        for h in 0..k {
            let th = fo(ni.d, h, t1);
            let mut inner = &ni.hd * self.phi_w(i, th - ni.d as Time, t2)? + self.phi_wf(ni.d, th, t2);
            if fo(ni.d, h + 1, t1) == t2 {
                inner += &ni.hbar_ad * &self.model.qw;
            }
            m += &pw * inner;
            pw = pw * &ni.had;
        }
        Ok(m)
    }

    /// `Γ_ij(t)` from `Γ_ij(t - d_j - 1)` and the local-error kernels.
    pub fn gamma_step(&mut self, i: usize, j: usize, t: Time) -> Result<Mat<T>> {
        let nj = self.nodes[j].clone();
        let d = nj.d as Time;
        if t < d + 1 {
            return Err(Error::Dependency(format!("Γ_{}{}({t}) needs history before time 0", i + 1, j + 1)));
        }
        let prev = self.gamma(i, t - d - 1, j, t - d - 1)?;
        Ok(self.prod_phi(i, t, t - d - 1)? * prev * nj.had.transpose()
            + self.phi_xx(i, t, j, t - d)? * nj.hd.transpose()
            + self.phi_f(i, t, nj.d, t)?
            + self.phi_w(i, t, t - d - 1)? * nj.hbar_ad.transpose())
    }

    /// `Ψ_ij(t) = E{x̃_i(t - d_i) x̃^c_j(t - d_j - 1)^T}`.
    pub fn psi_step(&mut self, i: usize, j: usize, t: Time) -> Result<Mat<T>> {
        let di = self.nodes[i].d as Time;
        if i == j {
            let g = self.gamma(i, t - di - 1, i, t - di - 1)?;
            return Ok(self.phik(i, t - di)? * g);
        }
        let nj = self.nodes[j].clone();
        let eta = self.period(i, j).eta;
        let fj = |k: usize| fo(nj.d, k, t);
        if fj(eta) < 0 {
            return Err(Error::Dependency(format!("Ψ_{}{}({t}) needs history before time 0", i + 1, j + 1)));
        }
        let mut m = self.zero();
        let mut pw = DMatrix::identity(self.n(), self.n());
        for k in 1..eta {
            let term = self.phi_xx(i, t - di, j, fj(k) - nj.d as Time)? * nj.hd.transpose()
                + self.phi_w(i, t - di, fj(k + 1))? * nj.hbar_ad.transpose()
                + self.phi_f(i, t - di, nj.d, fj(k))?;
            m += term * pw.transpose();
            pw = pw * &nj.had;
        }
        let g = self.gamma(i, fj(eta), j, fj(eta))?;
        m += self.prod_phi(i, t - di, fj(eta))? * g * pw.transpose();
        Ok(m)
    }

    fn sigma(&self, i: usize, tau_d: usize) -> Mat<T> {
        let ni = &self.nodes[i];
        let n = self.n();
        let k = tau_d.saturating_sub(1);
        let mut out = DMatrix::zeros(n, 3 * n * k);
        let mut pw = DMatrix::identity(n, n);
        for q in 0..k {
            out.view_mut((0, q * n), (n, n)).copy_from(&(&pw * &ni.hd));
            out.view_mut((0, (k + q) * n), (n, n)).copy_from(&(&pw * &ni.hbar_ad));
            out.view_mut((0, (2 * k + q) * n), (n, n)).copy_from(&pw);
            pw = pw * &ni.had;
        }
        out
    }

    /// Stacked noise-driven terms of node `i` over one period, as
    /// `(kind, time)` with kind 0 = local error, 1 = process noise, 2 = `F_w`.
    fn stack_items(&self, i: usize, t: Time, tau_d: usize) -> Vec<(u8, Time)> {
        let d = self.nodes[i].d;
        let k = tau_d.saturating_sub(1);
        let mut v = Vec::with_capacity(3 * k);
        for q in 1..=k {
            v.push((0, fo(d, q, t) - d as Time));
        }
        for q in 2..=tau_d {
            v.push((1, fo(d, q, t)));
        }
        for q in 1..=k {
            v.push((2, fo(d, q, t)));
        }
        v
    }

    fn item_cross(&mut self, i: usize, a: (u8, Time), j: usize, b: (u8, Time)) -> Result<Mat<T>> {
        let (di, dj) = (self.nodes[i].d, self.nodes[j].d);
        Ok(match (a.0, b.0) {
            (0, 0) => self.phi_xx(i, a.1, j, b.1)?,
            (0, 1) => self.phi_w(i, a.1, b.1)?,
            (0, 2) => self.phi_f(i, a.1, dj, b.1)?,
            (1, 0) => self.phi_w(j, b.1, a.1)?.transpose(),
            (1, 1) => {
                if a.1 == b.1 && a.1 >= 0 {
                    self.model.qw.clone()
                } else {
                    self.zero()
                }
            }
            (1, 2) => self.phi_wf(dj, b.1, a.1).transpose(),
            (2, 0) => self.phi_f(j, b.1, di, a.1)?.transpose(),
            (2, 1) => self.phi_wf(di, a.1, b.1),
            _ => self.ff(di, a.1, dj, b.1),
        })
    }

    fn item_with_cse(&mut self, i: usize, a: (u8, Time), j: usize, tb: Time) -> Result<Mat<T>> {
        let di = self.nodes[i].d;
        Ok(match a.0 {
            0 => self.gamma(i, a.1, j, tb)?,
            1 => self.theta_w(j, tb, a.1)?.transpose(),
            _ => self.theta_f(j, tb, di, a.1)?.transpose(),
        })
    }

    /// `(Υ_ij(t), Υ̂_ij(t))` with `Υ_ij(t) = E{x̃^c_i(t - d_i - 1) x̃^c_j(t - d_j - 1)^T}`.
    pub fn upsilon_step(&mut self, i: usize, j: usize, t: Time) -> Result<(Mat<T>, Mat<T>)> {
        let p = self.period(i, j);
        let tau = p.tau as Time;
        if t < tau {
            return Err(Error::Dependency(format!("Υ_{}{}({t}) needs Ξ before time 0", i + 1, j + 1)));
        }
        let n = self.n();
        let hi = mat_pow(&self.nodes[i].had, p.tau_di - 1);
        let hj = mat_pow(&self.nodes[j].had, p.tau_dj - 1);
        let si = self.sigma(i, p.tau_di);
        let sj = self.sigma(j, p.tau_dj);
        let ii = self.stack_items(i, t, p.tau_di);
        let jj = self.stack_items(j, t, p.tau_dj);
        let mut hat = self.zero();
        if p.tau_di > 1 && p.tau_dj > 1 {
            let mut ux = DMatrix::zeros(n * ii.len(), n * jj.len());
            for (a, &ia) in ii.iter().enumerate() {
                for (b, &jb) in jj.iter().enumerate() {
                    let blk = self.item_cross(i, ia, j, jb)?;
                    ux.view_mut((a * n, b * n), (n, n)).copy_from(&blk);
                }
            }
            hat += &si * ux * sj.transpose();
        }
        if p.tau_di > 1 {
            let mut uc = DMatrix::zeros(n * ii.len(), n);
            for (a, &ia) in ii.iter().enumerate() {
                let blk = self.item_with_cse(i, ia, j, t - tau)?;
                uc.view_mut((a * n, 0), (n, n)).copy_from(&blk);
            }
            hat += &si * uc * hj.transpose();
        }
        if p.tau_dj > 1 {
            let mut uc = DMatrix::zeros(n * jj.len(), n);
            for (b, &jb) in jj.iter().enumerate() {
                let blk = self.item_with_cse(j, jb, i, t - tau)?;
                uc.view_mut((b * n, 0), (n, n)).copy_from(&blk);
            }
            hat += &hi * uc.transpose() * sj.transpose();
        }
        let full = &hi * self.xi(i, t - tau, j, t - tau)? * hj.transpose() + &hat;
        Ok((full, hat))
    }

    /// `Ξ_ii(t)` from `Ξ_ii(t - d_i - 1)`, `P_ii(t - d_i)` and `Γ_ii(t - d_i - 1)`.
    pub fn xi_diag_step(&mut self, i: usize, t: Time) -> Result<Mat<T>> {
        let ni = self.nodes[i].clone();
        let d = ni.d as Time;
        if t < d + 1 {
            return Err(Error::Dependency(format!("Ξ_{0}{0}({t}) needs history before time 0", i + 1)));
        }
        let a = &self.model.a.clone();
        let prev = self.xi(i, t - d - 1, i, t - d - 1)?;
        let g = self.gamma(i, t - d - 1, i, t - d - 1)?;
        let phik = self.phik(i, t - d)?;
        let gk = self.gk(i, t - d)?;
        let qw = &self.model.qw;
        let cross = &phik * &g * a.transpose() + &gk * qw;
        let inner = hadamard(&ni.w, &(a * prev * a.transpose()))
            + hadamard(&ni.lambda, &self.p_ij(i, i, t - d)?)
            + hadamard(&ni.w, qw)
            + hadamard(&ni.v, &cross)
            + hadamard(&ni.v.transpose(), &cross.transpose());
        let ad = self.ap(ni.d);
        Ok(sym(&(&ad * inner * ad.transpose() + self.qw_tail(ni.d, 0))))
    }

    /// `Ξ_ij(t)`, `i != j`, from `Ξ_ij(t - τ_ij)`, `Υ̂_ij(t)`, `Ψ_ij(t)`, `Ψ_ji(t)` and the kernels.
    pub fn xi_offdiag_step(&mut self, i: usize, j: usize, t: Time) -> Result<Mat<T>> {
        self.xi_offdiag_with(i, j, t, false)
    }

    fn xi_offdiag_with(&mut self, i: usize, j: usize, t: Time, uncorrected: bool) -> Result<Mat<T>> {
        let p = self.period(i, j);
        let ni = self.nodes[i].clone();
        let nj = self.nodes[j].clone();
        let (di, dj) = (ni.d as Time, nj.d as Time);
        let tau = p.tau as Time;
        let (_, uhat) = self.upsilon_step(i, j, t)?;
        let psi_ij = self.psi_step(i, j, t)?;
        let psi_ji = self.psi_step(j, i, t)?;
        let qw = self.model.qw.clone();
        let head = mat_pow(&ni.had, p.tau_di) * self.xi(i, t - tau, j, t - tau)? * mat_pow(&nj.had, p.tau_dj).transpose();
        let tail = if uncorrected { self.qw_tail(ni.d.min(nj.d), 1) } else { self.qw_tail(ni.d.min(nj.d), 0) };
        let mut m = head + &ni.had * uhat * nj.had.transpose() + tail;
        m += &ni.hd
            * (self.phi_xx(i, t - di, j, t - dj)? * nj.hd.transpose()
                + &psi_ij * nj.had.transpose()
                + self.phi_f(i, t - di, nj.d, t)?
                + self.phi_w(i, t - di, t - dj - 1)? * nj.hbar_ad.transpose());
        let th_i = self.theta_w(i, t - di - 1, t - dj - 1)?;
        let right = if uncorrected { &nj.had } else { &nj.hbar_ad };
        m += &ni.had * (&th_i * right.transpose() + psi_ji.transpose() * nj.hd.transpose() + self.theta_f(i, t - di - 1, nj.d, t)?);
        let mut b = self.phi_w(j, t - dj, t - di - 1)?.transpose() * nj.hd.transpose();
        if di == dj {
            b += &qw * nj.hbar_ad.transpose();
        }
        if dj > di {
            b += &qw * self.ap(ni.d).transpose();
        }
        let th_j = if uncorrected {
            self.theta_w(i, t - dj - 1, t - di - 1)?
        } else {
            self.theta_w(j, t - dj - 1, t - di - 1)?
        };
        b += th_j.transpose() * nj.had.transpose();
        m += &ni.hbar_ad * b;
        m += self.phi_f(j, t - dj, ni.d, t)?.transpose() * nj.hd.transpose();
        m += self.theta_f(j, t - dj - 1, ni.d, t)?.transpose() * nj.had.transpose();
        if di > dj {
            m += self.ap(nj.d) * &qw * nj.hbar_ad.transpose();
        }
        Ok(m)
    }

    /// The off-diagonal block with the Θ subscript, the `H̄_Ad` factor and the noise-tail exponent left uncorrected, kept for comparison only.
    pub fn xi_offdiag_uncorrected(&mut self, i: usize, j: usize, t: Time) -> Result<Mat<T>> {
        self.xi_offdiag_with(i, j, t, true)
    }

    // ---------------------------------------------------------------
    // Time stepping.

    /// Advances the local filter covariances by one tick and fills every
    /// `Γ_ij(t)` and `Ξ_ij(t)` block of the new tick.
    pub fn advance(&mut self) -> Result<()> {
        let t = self.t + 1;
        let l = self.num_nodes();
        let mut gks = Vec::with_capacity(l);
        for i in 0..l {
            let (_, _, gk, p) = riccati_step(self.pii[i].get(t - 1)?, &self.model, i)?;
            let phik = &gk * &self.model.a;
            let e0 = &phik * self.e0x[i].get(t - 1)?;
            self.pii[i].push(p);
            self.phik[i].push(phik);
            self.e0x[i].push(e0);
            gks.push(gk);
        }
        for i in 0..l {
            for j in (i + 1)..l {
                let prev = self.pij[i][j].as_ref().unwrap().get(t - 1)?.clone();
                let next = cross_update(&prev, &gks[i], &gks[j], &self.model);
                self.pij[i][j].as_mut().unwrap().push(next);
            }
        }
        for (i, gk) in gks.into_iter().enumerate() {
            self.gk[i].push(gk);
        }
        self.t = t;
        let lemma = self.route == Route::Lemma && t >= self.warm;
        for i in 0..l {
            self.e0c(i, t)?;
        }
        for i in 0..l {
            for j in 0..l {
                if lemma {
                    let g = self.gamma_step(i, j, t)?;
                    self.memo.insert(Key::Gamma(i, t, j, t), g);
                } else {
                    self.gamma(i, t, j, t)?;
                }
            }
        }
        for i in 0..l {
            for j in i..l {
                if lemma {
                    let m = if i == j { self.xi_diag_step(i, t)? } else { self.xi_offdiag_step(i, j, t)? };
                    self.memo.insert(Key::Xi(i, t, j, t), m);
                } else {
                    self.xi(i, t, j, t)?;
                }
            }
        }
        if self.record {
            let rec = self.blocks(t)?;
            self.records.push(rec);
        }
        self.evict();
        Ok(())
    }

    fn evict(&mut self) {
        let keep = self.t - self.window;
        if keep <= 0 || self.t % 16 != 0 {
            return;
        }
        self.memo.retain(|k, _| k.oldest() >= keep);
        for h in self.pii.iter_mut().chain(self.gk.iter_mut()).chain(self.phik.iter_mut()).chain(self.e0x.iter_mut()) {
            h.trim(keep);
        }
        for row in self.pij.iter_mut() {
            for h in row.iter_mut().flatten() {
                h.trim(keep);
            }
        }
    }

    pub fn blocks(&mut self, t: Time) -> Result<TickBlocks<T>> {
        let l = self.num_nodes();
        let mut xi = vec![vec![self.zero(); l]; l];
        let mut gamma = vec![vec![self.zero(); l]; l];
        let mut psi = vec![vec![self.zero(); l]; l];
        for i in 0..l {
            for j in 0..l {
                xi[i][j] = self.xi(i, t, j, t)?;
                gamma[i][j] = self.gamma(i, t, j, t)?;
                let di = self.nodes[i].d as Time;
                let dj = self.nodes[j].d as Time;
                if t - di >= 0 && t - dj - 1 >= 0 {
                    psi[i][j] = self.gamma(i, t - di, j, t - dj - 1)?;
                }
            }
        }
        Ok(TickBlocks { t: t as usize, xi, gamma, psi })
    }

    /// `Ξ_ij(t)` at the current tick.
    pub fn xi_block(&mut self, i: usize, j: usize) -> Result<Mat<T>> {
        let t = self.t;
        self.xi(i, t, j, t)
    }

    /// Assembled `nL x nL` matrix `Ξ(t)` at the current tick, symmetrized.
    pub fn assemble_xi(&mut self) -> Result<Mat<T>> {
        let n = self.n();
        let l = self.num_nodes();
        let mut big = DMatrix::zeros(n * l, n * l);
        for i in 0..l {
            for j in 0..l {
                let b = self.xi_block(i, j)?;
                big.view_mut((i * n, j * n), (n, n)).copy_from(&b);
            }
        }
        let big = sym(&big);
        let lmin = lambda_min(&big);
        let scale = crate::linalg::max_abs(&big).max(T::one());
        if lmin < -c::<T>(1e-8) * scale {
            return Err(Error::Degenerate(format!("assembled covariance has eigenvalue {}", f(lmin))));
        }
        Ok(big)
    }

    pub fn current_pii(&self, i: usize) -> Result<Mat<T>> {
        self.p_ij(i, i, self.t)
    }
}

#[cfg(test)]
mod tests;
