//! Exact second moments by enumerating mask histories.
//!
//! The estimator is simulated in coefficient form: every state, estimate and
//! error is an `n x N` matrix acting on a standard normal basis made of the
//! initial error, the process noise `w(0..T-1)` and every node's measurement
//! noise `v_i(1..T)`. Local errors are mask free. Each node's compensating
//! estimate is enumerated over all of that node's mask histories; masks of
//! different nodes are independent, so cross-node moments factor through
//! per-node means.

use nalgebra::DMatrix;

use super::Scenario;
use crate::linalg::{mat_pow, psd_sqrt};
use crate::local_estimation::riccati_step;
use crate::{Error, Result};

type M = DMatrix<f64>;

/// Default cap on the number of mask histories enumerated for one node.
pub const ENUM_CAP: f64 = 1e6;

#[derive(Clone, Debug)]
pub struct OracleMoments {
    pub horizon: usize,
    pub delays: Vec<usize>,
    /// Local error coefficients `[i][t]`.
    local: Vec<Vec<M>>,
    /// Mean compensating-error coefficients `[i][t]`.
    mean_c: Vec<Vec<M>>,
    /// Same-node second moments `[i][t1][t2]`, `t1 >= t2`.
    second: Vec<Vec<Vec<M>>>,
}

impl OracleMoments {
    pub fn p_ij(&self, i: usize, j: usize, t: usize) -> M {
        &self.local[i][t] * self.local[j][t].transpose()
    }

    /// `E{x̃_i(t1) x̃^c_j(t2)^T}`.
    pub fn gamma(&self, i: usize, t1: usize, j: usize, t2: usize) -> M {
        &self.local[i][t1] * self.mean_c[j][t2].transpose()
    }

    /// `E{x̃^c_i(t1) x̃^c_j(t2)^T}`.
    pub fn xi(&self, i: usize, t1: usize, j: usize, t2: usize) -> M {
        if i != j {
            &self.mean_c[i][t1] * self.mean_c[j][t2].transpose()
        } else if t1 >= t2 {
            self.second[i][t1][t2].clone()
        } else {
            self.second[i][t2][t1].transpose()
        }
    }

    /// `Ψ_ij(t) = E{x̃_i(t - d_i) x̃^c_j(t - d_j - 1)^T}`, when both times exist.
    pub fn psi(&self, i: usize, j: usize, t: usize) -> Option<M> {
        let a = t.checked_sub(self.delays[i])?;
        let b = t.checked_sub(self.delays[j] + 1)?;
        Some(self.gamma(i, a, j, b))
    }

    /// `Υ_ij(t) = E{x̃^c_i(t - d_i - 1) x̃^c_j(t - d_j - 1)^T}`.
    pub fn upsilon(&self, i: usize, j: usize, t: usize) -> Option<M> {
        let a = t.checked_sub(self.delays[i] + 1)?;
        let b = t.checked_sub(self.delays[j] + 1)?;
        Some(self.xi(i, a, j, b))
    }

    /// Assembled `Ξ(t)`.
    pub fn xi_matrix(&self, t: usize) -> M {
        let l = self.local.len();
        let n = self.local[0][0].nrows();
        let mut big = M::zeros(n * l, n * l);
        for i in 0..l {
            for j in 0..l {
                big.view_mut((i * n, j * n), (n, n)).copy_from(&self.xi(i, t, j, t));
            }
        }
        big
    }
}

/// Number of mask histories the enumeration visits for the busiest node.
pub fn enumeration_size(sc: &Scenario<f64>, horizon: usize) -> f64 {
    sc.schemes
        .iter()
        .zip(&sc.delays)
        .map(|(s, &d)| (s.delta() as f64).powi((horizon + 1).saturating_sub(d) as i32))
        .fold(1.0, f64::max)
}

pub fn enumerate(sc: &Scenario<f64>, horizon: usize, cap: f64) -> Result<OracleMoments> {
    let size = enumeration_size(sc, horizon);
    if size > cap {
        return Err(Error::Size(format!("{size:.3e} mask histories exceed the cap {cap:.0e}; use monte-carlo mode")));
    }
    let model = &sc.model;
    let n = model.n();
    let l = model.num_nodes();
    let tt = horizon;
    let ms: Vec<usize> = model.sensors.iter().map(|s| s.c.nrows()).collect();
    let big_n = n + tt * n + tt * ms.iter().sum::<usize>();
    let w_col = |s: usize| n + s * n;
    let mut v_col = Vec::with_capacity(l);
    let mut off = n + tt * n;
    for &m in &ms {
        v_col.push(off);
        off += tt * m;
    }
    let sw = psd_sqrt(&model.qw);

    let mut x = Vec::with_capacity(tt + 1);
    let mut x0 = M::zeros(n, big_n);
    x0.view_mut((0, 0), (n, n)).copy_from(&psd_sqrt(&sc.p0));
    x.push(x0);
    for s in 0..tt {
        let mut nx = &model.a * &x[s];
        let mut blk = nx.view_mut((0, w_col(s)), (n, n));
        blk += &sw;
        x.push(nx);
    }

    let mut local = Vec::with_capacity(l);
    let mut xhat_all = Vec::with_capacity(l);
    for i in 0..l {
        let sen = &model.sensors[i];
        let sv = psd_sqrt(&sen.qv);
        let m = ms[i];
        let mut p = sc.p0.clone();
        let mut xh = vec![M::zeros(n, big_n)];
        for t in 1..=tt {
            let (_, k, _, pn) = riccati_step(&p, model, i)?;
            p = pn;
            let pred = &model.a * &xh[t - 1];
            let mut y = &sen.c * &x[t];
            let mut blk = y.view_mut((0, v_col[i] + (t - 1) * m), (m, m));
            blk += &sv;
            let innov = y - &sen.c * &pred;
            xh.push(pred + k * innov);
        }
        local.push((0..=tt).map(|t| &x[t] - &xh[t]).collect::<Vec<_>>());
        xhat_all.push(xh);
    }

    let mut mean_c = Vec::with_capacity(l);
    let mut second = Vec::with_capacity(l);
    for i in 0..l {
        let scheme = &sc.schemes[i];
        let d = sc.delays[i];
        let ad = mat_pow(&model.a, d);
        let mut acc = Acc {
            mean: vec![M::zeros(n, big_n); tt + 1],
            second: (0..=tt).map(|t| vec![M::zeros(n, n); t + 1]).collect(),
        };
        let ctx = Ctx { x: &x, xhat: &xhat_all[i], a: &model.a, ad: &ad, masks: &scheme.masks, probs: scheme.probs.clone(), d, tt };
        let mut xc_hist: Vec<M> = Vec::with_capacity(tt + 1);
        let mut ec_hist: Vec<M> = Vec::with_capacity(tt + 1);
        ctx.walk(0, 1.0, &mut xc_hist, &mut ec_hist, &mut acc);
        mean_c.push(acc.mean);
        second.push(acc.second);
    }
    Ok(OracleMoments { horizon, delays: sc.delays.clone(), local, mean_c, second })
}

struct Acc {
    mean: Vec<M>,
    second: Vec<Vec<M>>,
}

struct Ctx<'a> {
    x: &'a [M],
    xhat: &'a [M],
    a: &'a M,
    ad: &'a M,
    masks: &'a [M],
    probs: Vec<f64>,
    d: usize,
    tt: usize,
}

impl Ctx<'_> {
    fn record(&self, t: usize, wt: f64, ec_hist: &[M], acc: &mut Acc) {
        let e = &ec_hist[t];
        acc.mean[t] += e * wt;
        for (t2, slot) in acc.second[t].iter_mut().enumerate() {
            *slot += (e * ec_hist[t2].transpose()) * wt;
        }
    }

    fn walk(&self, t: usize, wt: f64, xc: &mut Vec<M>, ec: &mut Vec<M>, acc: &mut Acc) {
        if t > self.tt {
            return;
        }
        let n = self.a.nrows();
        if t < self.d {
            // Pure prediction of the prior mean, which is the zero vector here.
            xc.push(M::zeros(n, self.x[0].ncols()));
            ec.push(self.x[t].clone());
            self.record(t, wt, ec, acc);
            self.walk(t + 1, wt, xc, ec, acc);
            xc.pop();
            ec.pop();
            return;
        }
        let s = t - self.d;
        let fill = if s >= 1 { self.a * &xc[s - 1] } else { M::zeros(n, self.x[0].ncols()) };
        for (h, &p) in self.masks.iter().zip(&self.probs) {
            if p == 0.0 {
                continue;
            }
            let comp = h * &self.xhat[s] + (M::identity(n, n) - h) * &fill;
            let v = self.ad * comp;
            let e = &self.x[t] - &v;
            xc.push(v);
            ec.push(e);
            self.record(t, wt * p, ec, acc);
            self.walk(t + 1, wt * p, xc, ec, acc);
            xc.pop();
            ec.pop();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim_harness::scenarios::{example2, random_toy, ToyShape};

    #[test]
    fn mask_randomness_changes_same_node_moments() {
        let sc = random_toy::<f64>(1, ToyShape::default()).unwrap();
        let o = enumerate(&sc, 6, ENUM_CAP).unwrap();
        let mean_only = &o.mean_c[0][6] * o.mean_c[0][6].transpose();
        assert!((o.xi(0, 6, 0, 6) - mean_only).abs().max() > 1e-3);
    }

    #[test]
    fn toys_cover_pairs_and_delays() {
        let mut pairs = 0;
        let mut delays = std::collections::BTreeSet::new();
        for s in 0..12 {
            let sc = random_toy::<f64>(s, ToyShape::default()).unwrap();
            pairs += usize::from(sc.num_nodes() == 2);
            delays.extend(sc.delays.iter().copied());
        }
        assert!(pairs >= 3);
        assert_eq!(delays.len(), 3);
    }

    #[test]
    fn local_covariance_matches_riccati() {
        let sc = example2::<f64>().unwrap();
        let o = enumerate(&sc, 4, ENUM_CAP).unwrap();
        let mut p = sc.p0.clone();
        for t in 1..=4 {
            p = riccati_step(&p, &sc.model, 0).unwrap().3;
            assert!((o.p_ij(0, 0, t) - &p).abs().max() < 1e-10);
        }
    }

    #[test]
    fn oversized_enumeration_is_refused() {
        let sc = example2::<f64>().unwrap();
        assert!(matches!(enumerate(&sc, 12, ENUM_CAP), Err(Error::Size(_))));
    }
}
