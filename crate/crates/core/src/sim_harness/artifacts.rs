//! Scenario runs, oracle comparisons and the CSV and text artifacts behind
//! the command line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use super::monte_carlo::{self, z_scores};
use super::oracle::{enumerate, enumeration_size};
use super::scenarios::example1;
use super::Scenario;
use crate::compensation_fusion::{fusion_weights, run_dkfe, steady_for, write_weights, SteadyOutcome, Trace};
use crate::covariance_engine::{CovarianceLedger, Route, Time};
use crate::stability_analysis::{check_a105_b105, check_theorem3, LmiOptions, StabilityReport};
use crate::{Error, Result};

type M = DMatrix<f64>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Table1Row {
    pub gamma: f64,
    pub a105: bool,
    pub b105: bool,
    pub lambda_b105: f64,
}

/// Both no-delay conditions for Example 1 over `γ = 0.0, 0.1, ..., 1.0`.
pub fn reproduce_table1(opts: &LmiOptions) -> Result<Vec<Table1Row>> {
    (0..=10)
        .map(|k| {
            let gamma = k as f64 / 10.0;
            let sc = example1::<f64>(gamma)?;
            let r = check_a105_b105(&sc.model, &sc.schemes[0], opts)?;
            Ok(Table1Row { gamma, a105: r.a105, b105: r.b105, lambda_b105: r.lambda_b105 })
        })
        .collect()
}

pub fn table1_csv(rows: &[Table1Row]) -> String {
    let mut s = String::from("gamma,a105,b105,lambda_max\n");
    for r in rows {
        let _ = writeln!(s, "{:.1},{},{},{:.4}", r.gamma, r.a105, r.b105, r.lambda_b105);
    }
    s
}

/// `Tr Ξ_ii(t)` for `t = 0..=horizon` from the ledger alone.
pub fn xi_traces(sc: &Scenario<f64>, horizon: usize) -> Result<Vec<Vec<f64>>> {
    let mut led = CovarianceLedger::new(&sc.model, &sc.schemes, &sc.delays, &sc.p0)?;
    let l = sc.num_nodes();
    let mut out = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        if t > 0 {
            led.advance()?;
        }
        let mut row = Vec::with_capacity(l);
        for i in 0..l {
            row.push(led.xi_block(i, i)?.trace());
        }
        out.push(row);
    }
    Ok(out)
}

/// `Tr P(t)` of the fused estimate for `t = 0..=horizon`.
pub fn fused_traces(sc: &Scenario<f64>, horizon: usize) -> Result<Vec<f64>> {
    let mut led = CovarianceLedger::new(&sc.model, &sc.schemes, &sc.delays, &sc.p0)?;
    let mut out = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        if t > 0 {
            led.advance()?;
        }
        let xi = led.assemble_xi()?;
        out.push(fusion_weights(&xi, sc.n())?.1.trace());
    }
    Ok(out)
}

/// Files produced by one scenario run, in memory until written.
#[derive(Clone, Debug, Default)]
pub struct ArtifactBundle {
    pub files: Vec<(String, String)>,
}

impl ArtifactBundle {
    fn add(&mut self, name: &str, body: String) {
        self.files.push((name.to_string(), body));
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut out = Vec::new();
        for (name, body) in &self.files {
            let p = dir.join(name);
            std::fs::write(&p, body)?;
            out.push(p);
        }
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_str())
    }
}

fn trace_csv(tr: &Trace<f64>) -> Result<String> {
    let mut buf = Vec::new();
    tr.write_csv(&mut buf)?;
    Ok(String::from_utf8(buf).expect("ascii"))
}

/// Runs everything a scenario asks for and returns the artifacts. Nothing is
/// written here, so a failure leaves no partial output.
pub fn run_scenario(sc: &Scenario<f64>, lmi: &LmiOptions) -> Result<ArtifactBundle> {
    sc.validate()?;
    let mut bundle = ArtifactBundle::default();
    let report = check_theorem3(&sc.model, &sc.schemes, &sc.delays, lmi)?;
    bundle.add("stability.txt", report.to_text());
    bundle.add("stability.csv", report.to_csv());

    if let Some(sw) = &sc.sweep {
        let mut s = String::from("t,probs,trXi\n");
        for probs in &sw.probs {
            let v = sc.with_probs(sw.node, probs)?;
            let label: Vec<String> = probs.iter().map(|p| format!("{p:.2}")).collect();
            let label = label.join("/");
            match xi_traces(&v, sc.horizon) {
                Ok(tr) => {
                    for (t, row) in tr.iter().enumerate() {
                        let _ = writeln!(s, "{t},{label},{:.12e}", row[sw.node]);
                    }
                }
                Err(Error::Degenerate(_)) | Err(Error::Numeric(_)) => {
                    let _ = writeln!(s, "nan,{label},nan");
                }
                Err(e) => return Err(e),
            }
        }
        bundle.add("sweep.csv", s);
    }

    let steady: Option<SteadyOutcome<f64>> = if report.overall_theorem3 { Some(steady_for(sc)?) } else { None };
    let trace = run_dkfe(sc, steady.as_ref().map(|s| &s.state))?;
    bundle.add("trace.csv", trace_csv(&trace)?);

    let mut nodelay = sc.clone();
    nodelay.delays = vec![0; sc.num_nodes()];
    let ref_p = fused_traces(&nodelay, sc.horizon)?;
    let mut mse = String::from("t,trP_dkfe,trP_nodelay,sqerr_dkfe");
    for i in 1..=sc.num_nodes() {
        let _ = write!(mse, ",trXi_{i}");
    }
    mse.push('\n');
    let mut wn = String::from("t,node,frobenius\n");
    for (r, rp) in trace.rows.iter().zip(&ref_p) {
        let _ = write!(mse, "{},{:.12e},{:.12e},{:.12e}", r.t, r.trace_p(), rp, r.sq_err());
        for x in &r.xi_diag {
            let _ = write!(mse, ",{:.12e}", x.trace());
        }
        mse.push('\n');
        for (i, w) in r.weights.iter().enumerate() {
            let _ = writeln!(wn, "{},{},{:.12e}", r.t, i + 1, w.norm());
        }
    }
    bundle.add("mse.csv", mse);
    bundle.add("weight_norms.csv", wn);

    if let Some(st) = &steady {
        let mut buf = Vec::new();
        write_weights(&st.state, &mut buf)?;
        bundle.add("weights.mtx", String::from_utf8(buf).expect("ascii"));
        let mut er = String::from("t,comp,er\n");
        for r in &trace.rows {
            if let Some(xs) = &r.xhat_s {
                for k in 0..xs.len() {
                    let _ = writeln!(er, "{},{},{:.12e}", r.t, k + 1, r.xhat[k] - xs[k]);
                }
            }
        }
        bundle.add("er.csv", er);
    }
    Ok(bundle)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleMode {
    Enumeration,
    MonteCarlo,
}

#[derive(Clone, Copy, Debug)]
pub struct OracleConfig {
    pub mode: OracleMode,
    pub horizon: usize,
    pub replicas: usize,
    pub cap: f64,
    /// Standard errors allowed in Monte Carlo mode.
    pub sigmas: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { mode: OracleMode::Enumeration, horizon: 6, replicas: 10_000, cap: super::oracle::ENUM_CAP, sigmas: 3.0 }
    }
}

#[derive(Clone, Debug)]
pub struct OracleLine {
    pub quantity: String,
    /// Largest absolute deviation (enumeration) or largest z-score (Monte Carlo).
    pub worst: f64,
    /// Entries beyond the Monte Carlo band; zero in enumeration mode.
    pub outside: usize,
    pub entries: usize,
}

#[derive(Clone, Debug)]
pub struct OracleReport {
    pub mode: OracleMode,
    pub lines: Vec<OracleLine>,
}

impl OracleReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            match self.mode {
                OracleMode::Enumeration => {
                    let _ = writeln!(s, "{:<8} max |engine - oracle| = {:.3e} over {} blocks", l.quantity, l.worst, l.entries);
                }
                OracleMode::MonteCarlo => {
                    let _ = writeln!(s, "{:<8} max z = {:.2}, {} of {} entries outside the band", l.quantity, l.worst, l.outside, l.entries);
                }
            }
        }
        s
    }

    pub fn max_deviation(&self) -> f64 {
        self.lines.iter().fold(0.0, |m, l| m.max(l.worst))
    }
}

fn track(lines: &mut Vec<OracleLine>, name: &str, a: &M, b: &M) {
    let dev = (a - b).abs().max();
    match lines.iter_mut().find(|l| l.quantity == name) {
        Some(l) => {
            l.worst = l.worst.max(dev);
            l.entries += 1;
        }
        None => lines.push(OracleLine { quantity: name.into(), worst: dev, outside: 0, entries: 1 }),
    }
}

/// Compares the ledger against mask enumeration or Monte Carlo replicas.
pub fn run_oracle(sc: &Scenario<f64>, cfg: &OracleConfig) -> Result<OracleReport> {
    match cfg.mode {
        OracleMode::Enumeration => {
            let size = enumeration_size(sc, cfg.horizon);
            if size > cfg.cap {
                return Err(Error::Size(format!("{size:.3e} mask histories exceed the cap {:.0e}; use monte-carlo mode", cfg.cap)));
            }
            let o = enumerate(sc, cfg.horizon, cfg.cap)?;
            let mut led = CovarianceLedger::new(&sc.model, &sc.schemes, &sc.delays, &sc.p0)?;
            led.route = Route::Direct;
            let mut lines = Vec::new();
            let l = sc.num_nodes();
            for t in 0..=cfg.horizon {
                if t > 0 {
                    led.advance()?;
                }
                let tt = t as Time;
                for i in 0..l {
                    for j in 0..l {
                        track(&mut lines, "P", &led.p_ij(i, j, tt)?, &o.p_ij(i, j, t));
                        track(&mut lines, "Gamma", &led.gamma(i, tt, j, tt)?, &o.gamma(i, t, j, t));
                        track(&mut lines, "Xi", &led.xi(i, tt, j, tt)?, &o.xi(i, t, j, t));
                        let (di, dj) = (sc.delays[i] as Time, sc.delays[j] as Time);
                        if let Some(p) = o.psi(i, j, t) {
                            track(&mut lines, "Psi", &led.gamma(i, tt - di, j, tt - dj - 1)?, &p);
                        }
                        if let Some(u) = o.upsilon(i, j, t) {
                            track(&mut lines, "Upsilon", &led.xi(i, tt - di - 1, j, tt - dj - 1)?, &u);
                        }
                    }
                }
                let (_, p, _) = fusion_weights(&led.assemble_xi()?, sc.n())?;
                let (_, po, _) = fusion_weights(&o.xi_matrix(t), sc.n())?;
                track(&mut lines, "fused P", &p, &po);
            }
            Ok(OracleReport { mode: cfg.mode, lines })
        }
        OracleMode::MonteCarlo => {
            let an = monte_carlo::analytic(sc, cfg.horizon)?;
            let mc = monte_carlo::run(sc, &an, &[cfg.horizon], cfg.replicas)?;
            let (xe, xse) = mc.xi(cfg.horizon)?;
            let (pe, pse) = mc.p(cfg.horizon)?;
            let (w1, c1) = z_scores(&xe, &xse, &an.xi[cfg.horizon], cfg.sigmas);
            let (w2, c2) = z_scores(&pe, &pse, &an.p[cfg.horizon], cfg.sigmas);
            let m = xe.nrows();
            let n = pe.nrows();
            Ok(OracleReport {
                mode: cfg.mode,
                lines: vec![
                    OracleLine { quantity: "Xi".into(), worst: w1, outside: c1, entries: m * (m + 1) / 2 },
                    OracleLine { quantity: "fused P".into(), worst: w2, outside: c2, entries: n * (n + 1) / 2 },
                ],
            })
        }
    }
}

pub fn stability_for(sc: &Scenario<f64>, lmi: &LmiOptions) -> Result<StabilityReport<f64>> {
    check_theorem3(&sc.model, &sc.schemes, &sc.delays, lmi)
}
