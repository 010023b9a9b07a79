//! Monte Carlo estimates of error moments over seeded replicas.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::Scenario;
use crate::compensation_fusion::{combine, fusion_weights, Pipeline};
use crate::covariance_engine::CovarianceLedger;
use crate::{Error, Result};

type M = DMatrix<f64>;
type V = DVector<f64>;

/// Seed of replica `r` under a master seed.
pub fn replica_seed(master: u64, r: usize) -> u64 {
    master.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(r as u64).rotate_left(17) ^ 0x5851_f42d
}

/// Analytic quantities the replicas are compared against, per tick.
#[derive(Clone, Debug)]
pub struct Analytic {
    pub xi: Vec<M>,
    pub p: Vec<M>,
    pub weights: Vec<Vec<M>>,
}

pub fn analytic(sc: &Scenario<f64>, horizon: usize) -> Result<Analytic> {
    let mut ledger = CovarianceLedger::new(&sc.model, &sc.schemes, &sc.delays, &sc.p0)?;
    let n = sc.n();
    let mut out = Analytic { xi: Vec::new(), p: Vec::new(), weights: Vec::new() };
    for t in 0..=horizon {
        if t > 0 {
            ledger.advance()?;
        }
        let xi = ledger.assemble_xi()?;
        let (w, p, _) = fusion_weights(&xi, n)?;
        out.xi.push(xi);
        out.p.push(p);
        out.weights.push(w);
    }
    Ok(out)
}

/// Sums over replicas of `e`, `e e^T` and `(e e^T)∘(e e^T)` for the stacked
/// vector `[x̃^c_1; ...; x̃^c_L; x̃_fused]` at each recorded tick.
#[derive(Clone, Debug)]
struct Sums {
    s1: Vec<V>,
    s2: Vec<M>,
    s4: Vec<M>,
}

impl Sums {
    fn new(ticks: usize, dim: usize) -> Self {
        Sums { s1: vec![V::zeros(dim); ticks], s2: vec![M::zeros(dim, dim); ticks], s4: vec![M::zeros(dim, dim); ticks] }
    }

    fn add(mut self, o: Sums) -> Sums {
        for k in 0..self.s1.len() {
            self.s1[k] += &o.s1[k];
            self.s2[k] += &o.s2[k];
            self.s4[k] += &o.s4[k];
        }
        self
    }
}

#[derive(Clone, Debug)]
pub struct McMoments {
    pub replicas: usize,
    pub ticks: Vec<usize>,
    pub n: usize,
    pub nodes: usize,
    pub mean: Vec<V>,
    pub second: Vec<M>,
    /// Standard error of each entry of `second`.
    pub second_se: Vec<M>,
    /// Standard error of each entry of `mean`.
    pub mean_se: Vec<V>,
}

impl McMoments {
    fn index(&self, t: usize) -> Result<usize> {
        self.ticks.iter().position(|&s| s == t).ok_or_else(|| Error::Contract(format!("tick {t} not recorded")))
    }

    /// Empirical `Ξ(t)` and its entrywise standard errors.
    pub fn xi(&self, t: usize) -> Result<(M, M)> {
        let k = self.index(t)?;
        let m = self.n * self.nodes;
        Ok((self.second[k].view((0, 0), (m, m)).into_owned(), self.second_se[k].view((0, 0), (m, m)).into_owned()))
    }

    /// Empirical fused error covariance and standard errors.
    pub fn p(&self, t: usize) -> Result<(M, M)> {
        let k = self.index(t)?;
        let m = self.n * self.nodes;
        let n = self.n;
        Ok((self.second[k].view((m, m), (n, n)).into_owned(), self.second_se[k].view((m, m), (n, n)).into_owned()))
    }

    /// Sample mean of the fused error and its standard errors.
    pub fn fused_mean(&self, t: usize) -> Result<(V, V)> {
        let k = self.index(t)?;
        let m = self.n * self.nodes;
        Ok((self.mean[k].rows(m, self.n).into_owned(), self.mean_se[k].rows(m, self.n).into_owned()))
    }
}

/// Runs `replicas` independent pipelines fused with the analytic weight
/// schedule and returns moments at the requested ticks.
pub fn run(sc: &Scenario<f64>, analytic: &Analytic, ticks: &[usize], replicas: usize) -> Result<McMoments> {
    let horizon = *ticks.iter().max().ok_or_else(|| Error::Contract("no ticks requested".into()))?;
    if horizon >= analytic.weights.len() {
        return Err(Error::Contract(format!("weights cover {} ticks, need {}", analytic.weights.len(), horizon + 1)));
    }
    if replicas < 2 {
        return Err(Error::Validation("Monte Carlo needs at least two replicas".into()));
    }
    let n = sc.n();
    let l = sc.num_nodes();
    let dim = n * (l + 1);
    let chunk = 64usize;
    let chunks: Vec<usize> = (0..replicas.div_ceil(chunk)).collect();
    let total = chunks
        .par_iter()
        .map(|&ci| -> Result<Sums> {
            let mut sums = Sums::new(ticks.len(), dim);
            for r in ci * chunk..((ci + 1) * chunk).min(replicas) {
                let mut pipe = Pipeline::new(sc, replica_seed(sc.seed, r));
                for t in 0..=horizon {
                    pipe.step()?;
                    if let Some(k) = ticks.iter().position(|&s| s == t) {
                        let cse = pipe.cse_values();
                        let fused = combine(&analytic.weights[t], &cse);
                        let mut e = V::zeros(dim);
                        for (i, v) in cse.iter().enumerate() {
                            e.rows_mut(i * n, n).copy_from(&(&pipe.x - v));
                        }
                        e.rows_mut(l * n, n).copy_from(&(&pipe.x - fused));
                        let outer = &e * e.transpose();
                        sums.s1[k] += &e;
                        sums.s4[k] += outer.component_mul(&outer);
                        sums.s2[k] += outer;
                    }
                }
            }
            Ok(sums)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(Sums::new(ticks.len(), dim), Sums::add);
    let rf = replicas as f64;
    let mut out = McMoments { replicas, ticks: ticks.to_vec(), n, nodes: l, mean: vec![], second: vec![], second_se: vec![], mean_se: vec![] };
    for k in 0..ticks.len() {
        let mean = &total.s1[k] / rf;
        let second = &total.s2[k] / rf;
        let var4 = (&total.s4[k] / rf - second.component_mul(&second)).map(|v| v.max(0.0));
        let second_se = var4.map(|v| (v / (rf - 1.0)).sqrt());
        let diag = second.diagonal();
        let mean_se = V::from_fn(dim, |a, _| ((diag[a] - mean[a] * mean[a]).max(0.0) / (rf - 1.0)).sqrt());
        out.mean.push(mean);
        out.second.push(second);
        out.second_se.push(second_se);
        out.mean_se.push(mean_se);
    }
    Ok(out)
}

/// Largest `|empirical - analytic| / se` over the entries, and the number of
/// entries beyond `k` standard errors.
pub fn z_scores(emp: &M, se: &M, analytic: &M, k: f64) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for a in 0..emp.nrows() {
        for b in a..emp.ncols() {
            let s = se[(a, b)].max(1e-300);
            let z = (emp[(a, b)] - analytic[(a, b)]).abs() / s;
            worst = worst.max(z);
            if z > k {
                count += 1;
            }
        }
    }
    (worst, count)
}
