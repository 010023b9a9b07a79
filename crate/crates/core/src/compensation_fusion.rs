//! Fusion-center runtime: compensating state estimates, optimally weighted
//! fusion, the recursive estimator and its steady-state form.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::covariance_engine::CovarianceLedger;
use crate::linalg::{c, f, lambda_max, lambda_min, max_abs, mat_pow, psd_pinv, psd_sqrt, spd_inverse, sym, Mat, Real, Vec_};
use crate::local_estimation::{kalman_step, LocalFilterState};
use crate::model_core::SystemModel;
use crate::reduction_channel::{node_rng, CompressedPacket, DelayMode, DelayedLink, SelectionScheme};
use crate::sim_harness::Scenario;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct CseState<T: Real> {
    pub node: usize,
    pub d: usize,
    /// `x̂^c_i(t)`; meaningful once `t` is set.
    pub xc: Vec_<T>,
    /// The last `d + 1` estimates, newest at the back.
    pub history: VecDeque<Vec_<T>>,
    /// Time of `xc`, or `None` before the first step.
    pub t: Option<usize>,
    /// Prior mean used during start-up.
    pub mean0: Vec_<T>,
}

impl<T: Real> CseState<T> {
    pub fn new(node: usize, d: usize, mean0: Vec_<T>) -> Self {
        CseState { node, d, xc: mean0.clone(), history: VecDeque::with_capacity(d + 1), t: None, mean0 }
    }

    fn next_t(&self) -> usize {
        self.t.map_or(0, |t| t + 1)
    }

    /// `x̂^c_i(t - d - 1)` for the tick being computed, if it exists.
    fn lagged(&self) -> Option<&Vec_<T>> {
        if self.history.len() == self.d + 1 {
            self.history.front()
        } else {
            None
        }
    }
}

/// Computes `x̂^c_i` at the next tick. A missing packet after start-up leaves
/// every component to the prediction.
pub fn cse_step<T: Real>(
    state: &CseState<T>,
    delivered: Option<&CompressedPacket<T>>,
    model: &SystemModel<T>,
    scheme: &SelectionScheme<T>,
) -> Result<CseState<T>> {
    let t = state.next_t();
    let d = state.d;
    let a = &model.a;
    let xc = if t < d {
        if let Some(p) = delivered {
            return Err(Error::Protocol(format!("node {} delivered a packet stamped {} before start-up ended", state.node + 1, p.t_sent)));
        }
        mat_pow(a, t) * &state.mean0
    } else {
        let fill = match state.lagged() {
            Some(prev) => a * prev,
            None => state.mean0.clone(),
        };
        let inner = match delivered {
            Some(p) => {
                if p.t_sent + d != t || p.node != state.node {
                    return Err(Error::Protocol(format!(
                        "node {} expected the packet stamped {} at tick {t}, got node {} stamped {}",
                        state.node + 1,
                        t - d,
                        p.node + 1,
                        p.t_sent
                    )));
                }
                let mut v = fill;
                for &k in &scheme.sets[p.mask_index] {
                    v[k] = T::zero();
                }
                v + p.expand(scheme)
            }
            None => fill,
        };
        mat_pow(a, d) * inner
    };
    let mut next = state.clone();
    if next.history.len() == d + 1 {
        next.history.pop_front();
    }
    next.history.push_back(xc.clone());
    next.xc = xc;
    next.t = Some(t);
    Ok(next)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    Recursive,
    Steady,
}

#[derive(Clone, Debug)]
pub struct FusionState<T: Real> {
    pub weights: Vec<Mat<T>>,
    pub xhat: Vec_<T>,
    pub p: Mat<T>,
    pub mode: FusionMode,
    /// `[I_n; ...; I_n]`, `nL x n`.
    pub ia: Mat<T>,
    /// Set when `Ξ` was singular and a pseudo-inverse was used.
    pub ridged: bool,
}

pub fn stacked_identity<T: Real>(n: usize, l: usize) -> Mat<T> {
    DMatrix::from_fn(n * l, n, |r, k| if r % n == k { T::one() } else { T::zero() })
}

/// Optimal weights and fused covariance for an assembled `Ξ`.
pub fn fusion_weights<T: Real>(xi: &Mat<T>, n: usize) -> Result<(Vec<Mat<T>>, Mat<T>, bool)> {
    if xi.nrows() != xi.ncols() || xi.nrows() % n != 0 || xi.nrows() == 0 {
        return Err(Error::Contract(format!("Ξ is {}x{}, not a multiple of n = {n}", xi.nrows(), xi.ncols())));
    }
    let l = xi.nrows() / n;
    if l == 1 {
        return Ok((vec![DMatrix::identity(n, n)], sym(xi), false));
    }
    let ia = stacked_identity::<T>(n, l);
    let lmin = lambda_min(xi);
    let lmax = lambda_max(xi);
    let (xinv, ridged) = if lmin > lmax * c::<T>(1e-11) {
        spd_inverse(xi)?
    } else {
        // Start-up ticks where estimates share their whole error.
        (psd_pinv(xi, c(1e-11)).0, true)
    };
    let info = ia.transpose() * &xinv * &ia;
    let (p, r2) = spd_inverse(&sym(&info))?;
    let big = &p * ia.transpose() * &xinv;
    let weights = (0..l).map(|i| big.columns(i * n, n).into_owned()).collect();
    Ok((weights, sym(&p), ridged || r2))
}

pub fn fuse<T: Real>(cses: &[Vec_<T>], xi: &Mat<T>) -> Result<FusionState<T>> {
    let n = cses.first().ok_or_else(|| Error::Contract("no estimates to fuse".into()))?.len();
    if xi.nrows() != n * cses.len() {
        return Err(Error::Contract(format!("Ξ has {} rows for {} estimates of size {n}", xi.nrows(), cses.len())));
    }
    let (weights, p, ridged) = fusion_weights(xi, n)?;
    let xhat = combine(&weights, cses);
    Ok(FusionState { weights, xhat, p, mode: FusionMode::Recursive, ia: stacked_identity(n, cses.len()), ridged })
}

pub fn combine<T: Real>(weights: &[Mat<T>], xs: &[Vec_<T>]) -> Vec_<T> {
    let mut x = DVector::zeros(xs[0].len());
    for (w, v) in weights.iter().zip(xs) {
        x += w * v;
    }
    x
}

/// Independent random streams of one run: plant, per-node masks and per-node
/// measurement noise.
pub struct Streams {
    plant: ChaCha8Rng,
    masks: Vec<ChaCha8Rng>,
    meas: Vec<ChaCha8Rng>,
}

impl Streams {
    pub fn new(seed: u64, nodes: usize) -> Self {
        let mut plant = ChaCha8Rng::seed_from_u64(seed);
        plant.set_stream(0);
        Streams {
            plant,
            masks: (0..nodes).map(|i| node_rng(seed, i)).collect(),
            meas: (0..nodes).map(|i| node_rng(seed, nodes + i)).collect(),
        }
    }
}

fn gaussian<T: Real>(rng: &mut ChaCha8Rng, sqrt_cov: &Mat<T>) -> Vec_<T> {
    let z = DVector::from_fn(sqrt_cov.ncols(), |_, _| c::<T>(StandardNormal.sample(rng)));
    sqrt_cov * z
}

/// Plant, sink nodes, links and compensating estimates of one run.
pub struct Pipeline<T: Real> {
    pub sc: Scenario<T>,
    pub x: Vec_<T>,
    pub filters: Vec<LocalFilterState<T>>,
    pub links: Vec<DelayedLink>,
    pub cses: Vec<CseState<T>>,
    pub t: Option<usize>,
    streams: Streams,
    sqrt_qw: Mat<T>,
    sqrt_qv: Vec<Mat<T>>,
    sqrt_p0: Mat<T>,
}

impl<T: Real> Pipeline<T> {
    pub fn new(sc: &Scenario<T>, seed: u64) -> Self {
        let l = sc.num_nodes();
        let links = (0..l)
            .map(|i| match sc.delay_modes[i] {
                DelayMode::Constant => DelayedLink::new(i, sc.delays[i]),
                DelayMode::Bounded => DelayedLink::bounded(i, sc.delays[i]),
            })
            .collect();
        Pipeline {
            x: sc.mean0.clone(),
            filters: (0..l).map(|i| LocalFilterState::initial(i, &sc.model, sc.mean0.clone(), sc.p0.clone())).collect(),
            links,
            cses: (0..l).map(|i| CseState::new(i, sc.delays[i], sc.mean0.clone())).collect(),
            t: None,
            streams: Streams::new(seed, l),
            sqrt_qw: psd_sqrt(&sc.model.qw),
            sqrt_qv: sc.model.sensors.iter().map(|s| psd_sqrt(&s.qv)).collect(),
            sqrt_p0: psd_sqrt(&sc.p0),
            sc: sc.clone(),
        }
    }

    /// Moves plant, sink nodes and links to the next tick and updates every
    /// compensating estimate.
    pub fn step(&mut self) -> Result<usize> {
        let model = &self.sc.model;
        let t = match self.t {
            None => {
                self.x = &self.sc.mean0 + gaussian(&mut self.streams.plant, &self.sqrt_p0);
                0
            }
            Some(t) => {
                self.x = &model.a * &self.x + gaussian(&mut self.streams.plant, &self.sqrt_qw);
                for i in 0..self.filters.len() {
                    let s = &model.sensors[i];
                    let y = &s.c * &self.x + gaussian(&mut self.streams.meas[i], &self.sqrt_qv[i]);
                    self.filters[i] = kalman_step(&self.filters[i], &y, model)?;
                }
                t + 1
            }
        };
        for i in 0..self.filters.len() {
            let scheme = &self.sc.schemes[i];
            let idx = scheme.sample(&mut self.streams.masks[i]);
            let pkt = CompressedPacket::compress(scheme, t, idx, &self.filters[i].xhat);
            let got = self.links[i].send_and_deliver(pkt, t)?;
            self.cses[i] = cse_step(&self.cses[i], got.as_ref(), model, scheme)?;
        }
        self.t = Some(t);
        Ok(t)
    }

    pub fn cse_values(&self) -> Vec<Vec_<T>> {
        self.cses.iter().map(|s| s.xc.clone()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct TickRecord<T: Real> {
    pub t: usize,
    pub x: Vec_<T>,
    pub xhat: Vec_<T>,
    pub xhat_s: Option<Vec_<T>>,
    pub p: Mat<T>,
    pub weights: Vec<Mat<T>>,
    pub xi_diag: Vec<Mat<T>>,
    pub cse: Vec<Vec_<T>>,
}

impl<T: Real> TickRecord<T> {
    pub fn trace_p(&self) -> T {
        self.p.trace()
    }

    pub fn sq_err(&self) -> T {
        (&self.x - &self.xhat).norm_squared()
    }
}

#[derive(Clone, Debug)]
pub struct Trace<T: Real> {
    pub rows: Vec<TickRecord<T>>,
    pub elapsed: Duration,
    /// Ticks at which `Ξ` was singular.
    pub ridged: Vec<usize>,
}

impl<T: Real> Trace<T> {
    pub fn per_tick(&self) -> Duration {
        self.elapsed / self.rows.len().max(1) as u32
    }

    /// `t, comp, x, xhat_dkfe, xhat_sdkfe, tracP, tracXi_1..L`, one row per tick and component.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let l = self.rows.first().map_or(0, |r| r.xi_diag.len());
        let mut head = String::from("t,comp,x,xhat_dkfe,xhat_sdkfe,tracP");
        for i in 1..=l {
            head.push_str(&format!(",tracXi_{i}"));
        }
        writeln!(w, "{head}")?;
        for r in &self.rows {
            let tp = f(r.trace_p());
            let xis: String = r.xi_diag.iter().map(|m| format!(",{:.12e}", f(m.trace()))).collect();
            for k in 0..r.x.len() {
                let s = r.xhat_s.as_ref().map_or(String::new(), |v| format!("{:.12e}", f(v[k])));
                writeln!(w, "{},{},{:.12e},{:.12e},{},{:.12e}{}", r.t, k + 1, f(r.x[k]), f(r.xhat[k]), s, tp, xis)?;
            }
        }
        Ok(())
    }
}

/// Recursive optimally weighted fusion driven by the ledger.
/// When `steady` is given, the fixed-weight estimate is computed alongside on
/// the same measurements.
pub fn run_dkfe<T: Real>(sc: &Scenario<T>, steady: Option<&FusionState<T>>) -> Result<Trace<T>> {
    let mut pipe = Pipeline::new(sc, sc.seed);
    let mut ledger = CovarianceLedger::new(&sc.model, &sc.schemes, &sc.delays, &sc.p0)?;
    let l = sc.num_nodes();
    let mut trace = Trace { rows: Vec::with_capacity(sc.horizon + 1), elapsed: Duration::ZERO, ridged: Vec::new() };
    let start = Instant::now();
    for t in 0..=sc.horizon {
        pipe.step()?;
        if t > 0 {
            ledger.advance()?;
        }
        let xi = ledger.assemble_xi()?;
        let cse = pipe.cse_values();
        let fs = fuse(&cse, &xi)?;
        if fs.ridged {
            trace.ridged.push(t);
        }
        let n = sc.n();
        let xi_diag = (0..l).map(|i| xi.view((i * n, i * n), (n, n)).into_owned()).collect();
        let xhat_s = steady.map(|s| combine(&s.weights, &cse));
        trace.rows.push(TickRecord { t, x: pipe.x.clone(), xhat: fs.xhat, xhat_s, p: fs.p, weights: fs.weights, xi_diag, cse });
    }
    trace.elapsed = start.elapsed();
    Ok(trace)
}

/// The same pipeline fused with fixed steady weights and no
/// covariance bookkeeping.
pub fn run_sdkfe<T: Real>(sc: &Scenario<T>, steady: &FusionState<T>) -> Result<Trace<T>> {
    if steady.mode != FusionMode::Steady {
        return Err(Error::State("steady weights have not been computed".into()));
    }
    if steady.weights.len() != sc.num_nodes() {
        return Err(Error::State(format!("{} steady weights for {} nodes", steady.weights.len(), sc.num_nodes())));
    }
    let mut pipe = Pipeline::new(sc, sc.seed);
    let mut trace = Trace { rows: Vec::with_capacity(sc.horizon + 1), elapsed: Duration::ZERO, ridged: Vec::new() };
    let start = Instant::now();
    for t in 0..=sc.horizon {
        pipe.step()?;
        let cse = pipe.cse_values();
        let xhat = combine(&steady.weights, &cse);
        trace.rows.push(TickRecord {
            t,
            x: pipe.x.clone(),
            xhat: xhat.clone(),
            xhat_s: Some(xhat),
            p: steady.p.clone(),
            weights: steady.weights.clone(),
            xi_diag: Vec::new(),
            cse,
        });
    }
    trace.elapsed = start.elapsed();
    Ok(trace)
}

#[derive(Clone, Debug)]
pub struct SteadyOutcome<T: Real> {
    pub state: FusionState<T>,
    pub xi: Mat<T>,
    /// Tick at which the period residual fell below tolerance.
    pub ticks: usize,
    pub residual: T,
}

/// Iterates the ledger until `Ξ` repeats over one full lcm period.
pub fn compute_steady_weights<T: Real>(
    model: &SystemModel<T>,
    schemes: &[SelectionScheme<T>],
    delays: &[usize],
    p0: &Mat<T>,
    tol: T,
    max_iter: usize,
) -> Result<SteadyOutcome<T>> {
    let mut ledger = CovarianceLedger::new(model, schemes, delays, p0)?;
    let period = ledger.lcm_period();
    let n = model.n();
    let mut past: VecDeque<Mat<T>> = VecDeque::with_capacity(period + 1);
    past.push_back(ledger.assemble_xi()?);
    let mut residual: T = c(f64::MAX);
    for t in 1..=max_iter {
        ledger.advance()?;
        let xi = ledger.assemble_xi()?;
        if past.len() == period {
            let old = past.pop_front().unwrap();
            let scale = max_abs(&xi).max(T::one());
            residual = max_abs(&(&xi - old)) / scale;
            if !residual.is_finite() {
                return Err(Error::Divergence(format!("Ξ is not finite at tick {t}")));
            }
            if residual < tol {
                let (weights, p, ridged) = fusion_weights(&xi, n)?;
                let state = FusionState {
                    weights,
                    xhat: DVector::zeros(n),
                    p,
                    mode: FusionMode::Steady,
                    ia: stacked_identity(n, delays.len()),
                    ridged,
                };
                return Ok(SteadyOutcome { state, xi, ticks: t, residual });
            }
        }
        past.push_back(xi);
    }
    Err(Error::Divergence(format!(
        "Ξ did not repeat over its period {period} within {max_iter} ticks; last relative residual {:.3e}",
        f(residual)
    )))
}

pub fn steady_for<T: Real>(sc: &Scenario<T>) -> Result<SteadyOutcome<T>> {
    compute_steady_weights(&sc.model, &sc.schemes, &sc.delays, &sc.p0, c(1e-9), 100_000)
}

/// Matrix-market style bundle: a `%%weights` header, then for every matrix a
/// `% name` line, `rows cols`, and the entries in column-major order.
pub fn write_weights<T: Real, W: Write>(state: &FusionState<T>, mut w: W) -> Result<()> {
    writeln!(w, "%%weights dense real")?;
    writeln!(w, "{}", state.weights.len())?;
    let mut put = |name: &str, m: &Mat<T>| -> Result<()> {
        writeln!(w, "% {name}")?;
        writeln!(w, "{} {}", m.nrows(), m.ncols())?;
        for v in m.iter() {
            writeln!(w, "{:.17e}", f(*v))?;
        }
        Ok(())
    };
    for (i, m) in state.weights.iter().enumerate() {
        put(&format!("Omega_{}", i + 1), m)?;
    }
    put("P", &state.p)
}

pub fn read_weights<T: Real>(text: &str) -> Result<FusionState<T>> {
    let mut lines = text.lines().map(str::trim).filter(|s| !s.is_empty());
    let bad = |m: &str| Error::Parse(format!("weights bundle: {m}"));
    if !lines.next().is_some_and(|h| h.starts_with("%%weights")) {
        return Err(bad("missing header"));
    }
    let count: usize = lines.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("missing matrix count"))?;
    let mut mats = Vec::with_capacity(count + 1);
    for _ in 0..=count {
        lines.next().filter(|s| s.starts_with('%')).ok_or_else(|| bad("missing matrix name"))?;
        let dims: Vec<usize> = lines
            .next()
            .ok_or_else(|| bad("missing dimensions"))?
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad("bad dimension")))
            .collect::<Result<_>>()?;
        if dims.len() != 2 {
            return Err(bad("dimension line needs two entries"));
        }
        let mut vals = Vec::with_capacity(dims[0] * dims[1]);
        for _ in 0..dims[0] * dims[1] {
            let v: f64 = lines.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad entry"))?;
            vals.push(c::<T>(v));
        }
        mats.push(DMatrix::from_vec(dims[0], dims[1], vals));
    }
    let p = mats.pop().unwrap();
    let n = p.nrows();
    Ok(FusionState {
        xhat: DVector::zeros(n),
        ia: stacked_identity(n, mats.len()),
        weights: mats,
        p,
        mode: FusionMode::Steady,
        ridged: false,
    })
}

pub fn save_weights<T: Real>(state: &FusionState<T>, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_weights(state, std::io::BufWriter::new(f))
}
