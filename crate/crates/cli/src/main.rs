use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdpb_core::channel::Strategy;
use cdpb_core::config::{Resolved, SystemConfig};
use cdpb_core::engine::StrategySpec;
use cdpb_core::experiment::{self, Axis};
use cdpb_core::optimizer;
use cdpb_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cdpb", version, about = "Power balancing and private over-the-air FL experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON config; defaults are used when omitted. `CDPB_*` env vars override either.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Base training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of consecutive seeds to train.
    #[arg(long)]
    seeds: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Two-stage optimization for both strategies -> optimize.csv
    Optimize(Common),
    /// Train one strategy for every seed -> train_<strategy>_<seed>.csv
    Train {
        #[command(flatten)]
        common: Common,
        /// idle | noisy | mixed:<q> | baseline:<gamma_based|h_min_based|is_based|noise_free>
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Sweep one axis -> sweep_<axis>.csv
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `name` or `name=v1,v2,...` with name one of tau, k, p, gamma_bar, portion
        #[arg(long)]
        axis: String,
    },
    /// RDP oracle / exact / bound grid -> rdp.csv
    Rdp {
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Numerical self-checks -> validate.csv
    Validate(Common),
}

fn resolve(c: &Common) -> Result<Resolved> {
    let mut cfg = match &c.config {
        Some(p) => SystemConfig::load(p)?,
        None => SystemConfig::default().with_overrides(std::env::vars())?,
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(n) = c.seeds {
        cfg.num_seeds = n;
    }
    cfg.validate()?;
    cfg.resolve()
}

fn prepare(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.display().to_string(), msg: e.to_string() })
}

fn parse_axis(spec: &str) -> Result<(Axis, Option<Vec<f64>>)> {
    let (name, list) = match spec.split_once('=') {
        Some((n, l)) => (n, Some(l)),
        None => (spec, None),
    };
    let axis: Axis = name.trim().parse()?;
    let values = list
        .map(|l| {
            l.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad axis value '{v}' in '{spec}'")))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .transpose()?;
    Ok((axis, values))
}

/// Returns whether every row is feasible.
fn optimize(c: &Common) -> Result<bool> {
    let res = resolve(c)?;
    prepare(&c.out)?;
    let mut rows = Vec::new();
    let mut feasible = true;
    for s in [Strategy::Idle, Strategy::Noisy] {
        match optimizer::two_stage_optimize(s, &res.optimizer) {
            Ok(sol) => rows.extend(experiment::optimize_rows(&[sol])),
            Err(Error::Infeasible { tau_min, tau_max }) => {
                eprintln!("{}: infeasible, tau_min={tau_min} > tau_max={tau_max}", s.name());
                feasible = false;
                let nan = experiment::fmt_f64(f64::NAN);
                let mut row = vec![s.name().to_string(), tau_min.to_string(), tau_max.to_string()];
                row.extend(std::iter::repeat_n(nan, 5));
                rows.push(row);
            }
            Err(e) => return Err(e),
        }
    }
    experiment::write_csv(&c.out.join("optimize.csv"), &experiment::OPTIMIZE_HEADER, &rows)?;
    Ok(feasible)
}

fn train(c: &Common, strategy: Option<&str>) -> Result<()> {
    let res = resolve(c)?;
    let spec: StrategySpec = strategy.unwrap_or(&res.config.strategy).parse()?;
    prepare(&c.out)?;
    let plan = experiment::plan_run(&res, spec)?;
    let seeds = experiment::seeds(&res);
    let runs = experiment::train(&res, &plan, &seeds)?;
    let tag = spec.to_string().replace(':', "_");
    for (seed, run) in seeds.iter().zip(&runs) {
        let path = c.out.join(format!("train_{tag}_{seed}.csv"));
        experiment::write_csv(&path, &experiment::TRAIN_HEADER, &experiment::train_rows(run))?;
    }
    let loss: Vec<f64> = runs.iter().filter_map(|r| r.final_weighted_loss()).collect();
    let eps: Vec<f64> = runs.iter().map(|r| r.eps()).collect();
    println!(
        "{spec}: rho={} tau={} median loss={:e} median eps={}",
        plan.rho,
        plan.tau,
        experiment::median(&loss),
        experiment::median(&eps)
    );
    Ok(())
}

fn sweep(c: &Common, axis: &str) -> Result<()> {
    let res = resolve(c)?;
    let (axis, values) = parse_axis(axis)?;
    prepare(&c.out)?;
    let rows = experiment::sweep(&res, axis, values)?;
    let path = c.out.join(format!("sweep_{}.csv", axis.name()));
    experiment::write_csv(&path, &experiment::SWEEP_HEADER, &experiment::sweep_rows(&rows))
}

fn rdp(out: &Path) -> Result<()> {
    prepare(out)?;
    let rows = experiment::default_rdp_grid()?;
    experiment::write_csv(&out.join("rdp.csv"), &experiment::RDP_HEADER, &experiment::rdp_rows(&rows))
}

/// Returns whether every check passed.
fn validate(c: &Common) -> Result<bool> {
    let res = resolve(c)?;
    prepare(&c.out)?;
    let checks = experiment::validate(&res)?;
    for ch in &checks {
        println!("[{}] {} = {:e} (tol {:e})", if ch.pass { "PASS" } else { "FAIL" }, ch.name, ch.measured, ch.tolerance);
    }
    experiment::write_csv(&c.out.join("validate.csv"), &experiment::CHECK_HEADER, &experiment::check_rows(&checks))?;
    Ok(checks.iter().all(|c| c.pass))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let ok = |b: bool| if b { ExitCode::SUCCESS } else { ExitCode::from(1) };
    Ok(match cli.cmd {
        Cmd::Optimize(c) => {
            if optimize(&c)? {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Cmd::Train { common, strategy } => {
            train(&common, strategy.as_deref())?;
            ExitCode::SUCCESS
        }
        Cmd::Sweep { common, axis } => {
            sweep(&common, &axis)?;
            ExitCode::SUCCESS
        }
        Cmd::Rdp { out } => {
            rdp(&out)?;
            ExitCode::SUCCESS
        }
        Cmd::Validate(c) => ok(validate(&c)?),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
