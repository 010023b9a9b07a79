use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dkfe::compensation_fusion::{run_dkfe, run_sdkfe, steady_for, write_weights};
use dkfe::linalg::f;
use dkfe::sim_harness::artifacts::{reproduce_table1, run_oracle, run_scenario, stability_for, table1_csv, OracleConfig, OracleMode};
use dkfe::sim_harness::{load_scenario, scenarios};
use dkfe::stability_analysis::{select_probabilities, Criterion, LmiOptions, SearchOptions};
use dkfe::{Error, Result, Scenario};

/// Candidates listed per node by `select-probs`, best margin first.
const SHOWN: usize = 20;

macro_rules! out {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

macro_rules! out_raw {
    ($($arg:tt)*) => {{
        let _ = write!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(name = "dkfe", version, about = "Distributed Kalman fusion under dimensionality reduction and delayed links")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Master seed, overriding the scenario's.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Monte Carlo replicas, overriding the scenario's.
    #[arg(long, global = true)]
    replicas: Option<usize>,
    /// Output directory, overriding the scenario's.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Simulation horizon, overriding the scenario's.
    #[arg(long, global = true)]
    horizon: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the time-varying fused estimator and write all artifacts.
    Simulate { scenario: String },
    /// Compute the steady-state weights and compare SDKFE against DKFE.
    Steady { scenario: String },
    /// Per-node stability conditions and the overall verdict.
    Stability { scenario: String },
    /// Compare the covariance ledger against a brute-force oracle.
    Oracle {
        scenario: String,
        #[arg(long, value_enum, default_value_t = ModeArg::Enumeration)]
        mode: ModeArg,
    },
    /// Both no-delay conditions for the scalar-gamma example over a gamma grid.
    Table1,
    /// Search selection probabilities satisfying a stability criterion.
    SelectProbs {
        scenario: String,
        #[arg(long, value_enum, default_value_t = CriterionArg::C2)]
        criterion: CriterionArg,
        /// Node to search for, 1-based; all nodes when omitted.
        #[arg(long)]
        node: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Enumeration,
    MonteCarlo,
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionArg {
    C1,
    C2,
}

/// A scenario file, or one of the bundled names `example1` and `example2`.
fn scenario(name: &str, cli: &Cli) -> Result<Scenario> {
    let p = Path::new(name);
    let mut sc = if p.exists() {
        load_scenario(p)?
    } else {
        match name {
            "example1" => scenarios::example1(0.5)?,
            "example2" => scenarios::example2()?,
            _ => return Err(Error::Validation(format!("scenario file {name} not found"))),
        }
    };
    if let Some(s) = cli.seed {
        sc.seed = s;
    }
    if let Some(r) = cli.replicas {
        sc.replicas = r;
    }
    if let Some(h) = cli.horizon {
        sc.horizon = h;
    }
    if let Some(o) = &cli.out {
        sc.out_dir = Some(o.clone());
    }
    sc.validate()?;
    Ok(sc)
}

fn out_dir(sc: &Scenario) -> PathBuf {
    sc.out_dir.clone().unwrap_or_else(|| PathBuf::from("out").join(&sc.name))
}

fn run(cli: &Cli) -> Result<()> {
    let lmi = LmiOptions::default();
    match &cli.cmd {
        Cmd::Simulate { scenario: s } => {
            let sc = scenario(s, cli)?;
            let bundle = run_scenario(&sc, &lmi)?;
            for p in bundle.write(&out_dir(&sc))? {
                out!("wrote {}", p.display());
            }
        }
        Cmd::Steady { scenario: s } => {
            let sc = scenario(s, cli)?;
            let report = stability_for(&sc, &lmi)?;
            if !report.overall_theorem3 {
                out_raw!("{}", report.to_text());
                return Err(Error::Divergence("no steady state: the stability conditions do not hold".into()));
            }
            let st = steady_for(&sc)?;
            out!("converged after {} ticks, period residual {:.3e}", st.ticks, f(st.residual));
            let mut buf = Vec::new();
            write_weights(&st.state, &mut buf)?;
            out_raw!("{}", String::from_utf8_lossy(&buf));
            let dk = run_dkfe(&sc, Some(&st.state))?;
            let sd = run_sdkfe(&sc, &st.state)?;
            let er = dk
                .rows
                .iter()
                .skip(3 * sc.lcm_period())
                .filter_map(|r| r.xhat_s.as_ref().map(|s| (&r.xhat - s).amax()))
                .fold(0.0, f64::max);
            out!("max |Er| after warm-up = {er:.3e}");
            out!("per-tick time DKFE {:.3e} s, SDKFE {:.3e} s", dk.elapsed.as_secs_f64() / dk.rows.len() as f64, sd.elapsed.as_secs_f64() / sd.rows.len() as f64);
            let dir = out_dir(&sc);
            std::fs::create_dir_all(&dir)?;
            dkfe::compensation_fusion::save_weights(&st.state, &dir.join("weights.mtx"))?;
            out!("wrote {}", dir.join("weights.mtx").display());
        }
        Cmd::Stability { scenario: s } => {
            let sc = scenario(s, cli)?;
            let report = stability_for(&sc, &lmi)?;
            out_raw!("{}", report.to_text());
            if let Some(dir) = &cli.out {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("stability.csv"), report.to_csv())?;
            }
        }
        Cmd::Oracle { scenario: s, mode } => {
            let sc = scenario(s, cli)?;
            let mut cfg = OracleConfig::default();
            cfg.mode = match mode {
                ModeArg::Enumeration => OracleMode::Enumeration,
                ModeArg::MonteCarlo => OracleMode::MonteCarlo,
            };
            cfg.replicas = sc.replicas;
            if let Some(h) = cli.horizon {
                cfg.horizon = h;
            } else if cfg.mode == OracleMode::MonteCarlo {
                cfg.horizon = sc.horizon;
            }
            out_raw!("{}", run_oracle(&sc, &cfg)?.to_text());
        }
        Cmd::Table1 => {
            let csv = table1_csv(&reproduce_table1(&lmi)?);
            out_raw!("{csv}");
            if let Some(dir) = &cli.out {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("table1.csv"), &csv)?;
            }
        }
        Cmd::SelectProbs { scenario: s, criterion, node } => {
            let sc = scenario(s, cli)?;
            let crit = match criterion {
                CriterionArg::C1 => Criterion::C1,
                CriterionArg::C2 => Criterion::C2,
            };
            let nodes: Vec<usize> = match node {
                Some(k) if *k >= 1 && *k <= sc.num_nodes() => vec![k - 1],
                Some(k) => return Err(Error::Validation(format!("node {k} out of range"))),
                None => (0..sc.num_nodes()).collect(),
            };
            let mut opts = SearchOptions::default();
            if let Some(sd) = cli.seed {
                opts.seed = sd;
            }
            for i in nodes {
                let sch = &sc.schemes[i];
                let found = select_probabilities(&sc.model, i, sch.r, sc.delays[i], crit, &opts)?;
                out!("node {}: {} feasible candidates", i + 1, found.len());
                let total = found.len();
                for cand in found.into_iter().take(SHOWN) {
                    let p: Vec<String> = cand.probs.iter().map(|x| format!("{x:.4}")).collect();
                    out!(
                        "  [{}] margin {:.4e} rho {:.4}{}",
                        p.join(", "),
                        cand.margin,
                        cand.rho_106,
                        if cand.on_grid { "" } else { " (refined)" }
                    );
                }
                if total > SHOWN {
                    out!("  ... {} more", total - SHOWN);
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
