//! Experiment drivers behind the CLI subcommands, and CSV output.
//!
//! Every driver returns plain rows; ordering is fixed before anything is
//! written, so the CSV bytes depend only on (config, seed).

use std::path::Path;
use std::str::FromStr;

use log::warn;

use crate::channel::{self, ChannelParams, Strategy};
use crate::config::Resolved;
use crate::convergence;
use crate::engine::{self, StrategySpec, TrainResult, TrainSpec};
use crate::error::{Error, Result};
use crate::optimizer::{self, Baseline, Objective, OptimizerConfig, PowerBalanceSolution};
use crate::par;
use crate::rdp::{self, PrivacyParams};
use crate::rng::{self, Purpose};
use crate::search;

pub const STRATEGIES: [Strategy; 2] = [Strategy::Idle, Strategy::Noisy];

/// Shortest representation that parses back to the same f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let io = |e: &dyn std::fmt::Display| Error::Io { path: path.display().to_string(), msg: e.to_string() };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(&e))?;
    w.write_record(header).map_err(|e| io(&e))?;
    for r in rows {
        w.write_record(r).map_err(|e| io(&e))?;
    }
    w.flush().map_err(|e| io(&e))
}

// ---------------------------------------------------------------- optimize

pub const OPTIMIZE_HEADER: [&str; 8] = ["strategy", "tau_min", "tau_max", "rho_opt", "tau_opt", "utility", "gamma", "eps"];

pub fn optimize(res: &Resolved) -> Result<Vec<PowerBalanceSolution>> {
    STRATEGIES.iter().map(|s| optimizer::two_stage_optimize(*s, &res.optimizer)).collect()
}

pub fn optimize_rows(sols: &[PowerBalanceSolution]) -> Vec<Vec<String>> {
    sols.iter()
        .map(|s| {
            vec![
                s.strategy.name().to_string(),
                s.feasible.tau_min.to_string(),
                s.feasible.tau_max.to_string(),
                fmt_f64(s.rho_opt),
                s.tau_opt.to_string(),
                fmt_f64(s.utility),
                fmt_f64(s.gamma),
                fmt_f64(s.eps),
            ]
        })
        .collect()
}

// ------------------------------------------------------------------- train

/// (ρ, τ) a strategy trains with. Mixed runs and the baselines use the
/// idle solution's τ so all trajectories have equal length; mixed also
/// reuses its ρ, which makes the portion endpoints coincide with the pure
/// strategies at matched seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunPlan {
    pub strategy: StrategySpec,
    pub rho: f64,
    pub tau: usize,
}

pub fn plan_run(res: &Resolved, strategy: StrategySpec) -> Result<RunPlan> {
    let cfg = &res.optimizer;
    let idle = || optimizer::two_stage_optimize(Strategy::Idle, cfg);
    let (rho, tau) = match strategy {
        StrategySpec::Noisy => {
            let s = optimizer::two_stage_optimize(Strategy::Noisy, cfg)?;
            (s.rho_opt, s.tau_opt)
        }
        StrategySpec::Idle | StrategySpec::Mixed(_) => {
            let s = idle()?;
            (s.rho_opt, s.tau_opt)
        }
        StrategySpec::Baseline(b) => {
            let tau = idle()?.tau_opt;
            let rho = match b {
                // set per round from the gain draw
                Baseline::HMinBased => cfg.rho_cap(),
                _ => optimizer::baseline_rho(b, cfg, tau, None)?,
            };
            (rho, tau)
        }
    };
    Ok(RunPlan { strategy, rho, tau })
}

pub fn seeds(res: &Resolved) -> Vec<u64> {
    let c = &res.config;
    (0..c.num_seeds as u64).map(|i| c.seed.wrapping_add(i)).collect()
}

pub fn train(res: &Resolved, plan: &RunPlan, seeds: &[u64]) -> Result<Vec<TrainResult>> {
    par::map_slice(seeds, |seed| {
        let spec = TrainSpec { strategy: plan.strategy, rho: plan.rho, tau: plan.tau, seed: *seed };
        engine::run_training(&res.task, &res.channel, &res.learning, &res.engine, &spec)
    })
    .into_iter()
    .collect()
}

pub const TRAIN_HEADER: [&str; 6] =
    ["t", "participants_count", "sigma_q2_realized", "loss_current", "loss_weighted", "eps_cumulative"];

pub fn train_rows(r: &TrainResult) -> Vec<Vec<String>> {
    r.trace
        .iter()
        .map(|t| {
            vec![
                t.t.to_string(),
                t.participants.len().to_string(),
                fmt_f64(t.sigma_q2_realized),
                fmt_f64(t.loss_current),
                fmt_f64(t.loss_weighted),
                fmt_f64(t.eps_cumulative),
            ]
        })
        .collect()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v: Vec<f64> = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

// ------------------------------------------------------------------- sweep

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Tau,
    K,
    Power,
    GammaBar,
    Portion,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Tau => "tau",
            Axis::K => "k",
            Axis::Power => "p",
            Axis::GammaBar => "gamma_bar",
            Axis::Portion => "portion",
        }
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            Axis::Tau => Vec::new(),
            Axis::K => vec![10.0, 25.0, 50.0, 100.0],
            Axis::Power => vec![0.5, 1.0, 2.0, 4.0],
            Axis::GammaBar => vec![0.005, 0.01, 0.02, 0.05],
            Axis::Portion => vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "tau" => Axis::Tau,
            "k" => Axis::K,
            "p" | "power" => Axis::Power,
            "gamma_bar" => Axis::GammaBar,
            "portion" => Axis::Portion,
            _ => return Err(Error::param("axis", format!("unknown axis '{s}'"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis_value: f64,
    pub strategy: String,
    pub metric: String,
    pub value: f64,
}

pub const SWEEP_HEADER: [&str; 4] = ["axis_value", "strategy", "metric", "value"];

pub fn sweep_rows(rows: &[SweepRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| vec![fmt_f64(r.axis_value), r.strategy.clone(), r.metric.clone(), fmt_f64(r.value)])
        .collect()
}

fn row(x: f64, strategy: &str, metric: &str, value: f64) -> SweepRow {
    SweepRow { axis_value: x, strategy: strategy.into(), metric: metric.into(), value }
}

/// |𝒯| = max(0, τ_max − τ_min + 1); 0 also when either end is undefined.
pub fn cardinality(strategy: Strategy, cfg: &OptimizerConfig) -> usize {
    match (optimizer::tau_gamma_min(strategy, cfg), optimizer::tau_eps_max(strategy, cfg)) {
        (Ok(lo), Ok(hi)) if hi >= lo => hi - lo + 1,
        _ => 0,
    }
}

/// Optimizer config with one axis moved. M, μ, G and a stay at the values
/// resolved for the base configuration.
pub fn with_axis(base: &OptimizerConfig, axis: Axis, x: f64) -> Result<OptimizerConfig> {
    let mut c = base.clone();
    match axis {
        Axis::K => {
            if !(x >= 1.0 && x.fract() == 0.0) {
                return Err(Error::param("k", format!("must be a positive integer, got {x}")));
            }
            let s2 = base
                .channel
                .homogeneous_sigma2()
                .ok_or_else(|| Error::param("sigma2", "K sweep needs a common sigma2"))?;
            c.channel = ChannelParams::homogeneous(x as usize, s2, base.channel.awgn_var)?;
        }
        Axis::Power => c.power = x,
        Axis::GammaBar => c.gamma_bar = x,
        Axis::Tau | Axis::Portion => {}
    }
    c.validate()?;
    Ok(c)
}

fn optimizer_point(x: f64, cfg: &OptimizerConfig) -> Vec<SweepRow> {
    let mut out = Vec::new();
    let mut util = [None, None];
    let mut card = [0usize; 2];
    for (i, s) in STRATEGIES.iter().enumerate() {
        card[i] = cardinality(*s, cfg);
        out.push(row(x, s.name(), "card", card[i] as f64));
        match optimizer::two_stage_optimize(*s, cfg) {
            Ok(sol) => {
                out.push(row(x, s.name(), "utility", sol.utility));
                out.push(row(x, s.name(), "tau_opt", sol.tau_opt as f64));
                out.push(row(x, s.name(), "rho_opt", sol.rho_opt));
                util[i] = Some(sol.utility);
            }
            Err(e) => warn!("{} at {x}: {e}", s.name()),
        }
    }
    out.push(row(x, "disparity", "card", card[0] as f64 - card[1] as f64));
    if let (Some(ui), Some(un)) = (util[0], util[1]) {
        out.push(row(x, "disparity", "utility", un - ui));
    }
    out
}

pub fn sweep(res: &Resolved, axis: Axis, values: Option<Vec<f64>>) -> Result<Vec<SweepRow>> {
    let values = values.unwrap_or_else(|| axis.default_values());
    let mut rows: Vec<SweepRow> = match axis {
        Axis::K | Axis::Power | Axis::GammaBar => {
            let cfgs: Vec<OptimizerConfig> =
                values.iter().map(|x| with_axis(&res.optimizer, axis, *x)).collect::<Result<_>>()?;
            par::map_range(values.len(), |i| optimizer_point(values[i], &cfgs[i])).into_iter().flatten().collect()
        }
        Axis::Tau => {
            let mut out = Vec::new();
            for s in STRATEGIES {
                let (_, pts) = optimizer::stage_two_curve(s, &res.optimizer)?;
                for p in pts.iter().filter(|p| values.is_empty() || values.contains(&(p.tau as f64))) {
                    let x = p.tau as f64;
                    out.push(row(x, s.name(), "utility", p.utility));
                    out.push(row(x, s.name(), "rho", p.rho));
                    out.push(row(x, s.name(), "gamma", p.gamma));
                    out.push(row(x, s.name(), "eps", p.eps));
                }
            }
            out
        }
        Axis::Portion => {
            let base = plan_run(res, StrategySpec::Idle)?;
            let seeds = seeds(res);
            let mut out = Vec::new();
            for q in &values {
                let plan = RunPlan { strategy: StrategySpec::Mixed(*q), ..base };
                plan.strategy.validate()?;
                let runs = train(res, &plan, &seeds)?;
                let lw: Vec<f64> = runs.iter().filter_map(TrainResult::final_weighted_loss).collect();
                let lc: Vec<f64> = runs.iter().filter_map(|r| r.trace.last().map(|t| t.loss_current)).collect();
                let eps: Vec<f64> = runs.iter().map(TrainResult::eps).collect();
                out.push(row(*q, "mixed", "loss_weighted_median", median(&lw)));
                out.push(row(*q, "mixed", "loss_current_median", median(&lc)));
                out.push(row(*q, "mixed", "eps_median", median(&eps)));
            }
            out
        }
    };
    rows.sort_by(|a, b| {
        a.axis_value
            .total_cmp(&b.axis_value)
            .then_with(|| a.strategy.cmp(&b.strategy))
            .then_with(|| a.metric.cmp(&b.metric))
    });
    Ok(rows)
}

// --------------------------------------------------------------------- rdp

pub const RDP_HEADER: [&str; 6] = ["alpha", "p", "snr", "oracle", "exact", "bound"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdpRow {
    pub alpha: u32,
    pub p: f64,
    /// W²/σ_q².
    pub snr: f64,
    pub oracle: f64,
    pub exact: f64,
    pub bound: f64,
}

pub fn rdp_grid(alphas: &[u32], ps: &[f64], snrs: &[f64]) -> Result<Vec<RdpRow>> {
    let mut pts = Vec::new();
    for a in alphas {
        for p in ps {
            for s in snrs {
                pts.push((*a, *p, *s));
            }
        }
    }
    par::map_slice(&pts, |&(alpha, p, snr)| {
        let pp = PrivacyParams::new(alpha as f64, 1.0, 1.0 / snr, p);
        Ok(RdpRow {
            alpha,
            p,
            snr,
            oracle: rdp::renyi_divergence_oracle(alpha as f64, p, 2f64.sqrt(), 1.0 / snr)?,
            exact: rdp::subsampled_round_eps_exact(&pp)?,
            bound: rdp::subsampled_round_eps_bound(&pp)?,
        })
    })
    .into_iter()
    .collect()
}

pub fn default_rdp_grid() -> Result<Vec<RdpRow>> {
    rdp_grid(&[2, 3, 4, 5, 6, 7, 8], &[0.0, 0.1, 0.3, 0.5, 0.7, 0.9], &[0.01, 0.1, 0.5])
}

pub fn rdp_rows(rows: &[RdpRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                r.alpha.to_string(),
                fmt_f64(r.p),
                fmt_f64(r.snr),
                fmt_f64(r.oracle),
                fmt_f64(r.exact),
                fmt_f64(r.bound),
            ]
        })
        .collect()
}

// ---------------------------------------------------------------- validate

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub const CHECK_HEADER: [&str; 4] = ["check", "measured", "tolerance", "pass"];

pub fn check_rows(checks: &[Check]) -> Vec<Vec<String>> {
    checks
        .iter()
        .map(|c| vec![c.name.clone(), fmt_f64(c.measured), fmt_f64(c.tolerance), c.pass.to_string()])
        .collect()
}

fn check(name: &str, measured: f64, tolerance: f64) -> Check {
    Check { name: name.into(), measured, tolerance, pass: measured <= tolerance }
}

fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}

/// Monte-Carlo K_t, P_n, P_i at ρ against the closed forms. Returns the
/// largest relative error of the three.
pub fn channel_mc_error(cfg: &OptimizerConfig, rho: f64, draws: usize, seed: u64) -> Result<f64> {
    let (p, w) = (cfg.power, cfg.grad_bound);
    let h_th = channel::threshold(rho, p, w)?;
    let params = &cfg.channel;
    let k = params.num_clients();
    // per-client chunks keep the estimate independent of the worker count
    let per_client: Vec<(f64, f64, f64)> = par::map_range(k, |c| {
        let one = ChannelParams { sigma2: vec![params.sigma2[c]], awgn_var: params.awgn_var };
        let mut r = rng::stream(seed, 0, c as u64, Purpose::Channel);
        let n = draws.div_ceil(k);
        let (mut kt, mut pn, mut pi) = (0.0, 0.0, 0.0);
        for t in 0..n {
            let h = channel::sample_gains(&one, &mut r, t).gains[0];
            if h >= h_th {
                kt += 1.0;
                pn += p * h - rho * w * w;
                pi += p * h - rho * w * w;
            } else {
                pn += p * h;
            }
        }
        (kt / n as f64, pn / n as f64, pi / n as f64)
    });
    let sum = per_client.iter().fold((0.0, 0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    let kt = channel::expected_participants(rho, params, p, w)?;
    let pn = channel::expected_noise_power(Strategy::Noisy, rho, params, p, w)?;
    let pi = channel::expected_noise_power(Strategy::Idle, rho, params, p, w)?;
    Ok(rel(sum.0, kt).max(rel(sum.1, pn)).max(rel(sum.2, pi)))
}

/// Relative gap between the closed-form ρ_γ and a 10⁴-point grid refined by
/// golden section on the bracketed term.
pub fn rho_gamma_gap(strategy: Strategy, cfg: &OptimizerConfig) -> Result<f64> {
    let closed = optimizer::rho_gamma(strategy, cfg)?;
    let obj = Objective::Cdpb(strategy);
    let f = |x: f64| {
        cfg.context(obj, x)
            .and_then(|ctx| convergence::gamma_approx(1, x, &cfg.learning, &ctx))
            .unwrap_or(f64::INFINITY)
    };
    let cap = cfg.rho_cap();
    let m = search::robust_minimize(f, 1e-9 * cap, cap, 10_000, 1e-13 * cap);
    Ok(rel(closed, m.x))
}

/// Relative gap between the fixed-point ρ_opt,idle and the numerical
/// minimizer of the idle utility at τ.
pub fn rho_opt_idle_gap(tau: usize, cfg: &OptimizerConfig) -> Result<f64> {
    let closed = optimizer::rho_opt_idle(tau, cfg)?;
    let num = optimizer::rho_numeric(Objective::Cdpb(Strategy::Idle), tau, cfg).x;
    Ok(rel(closed, num))
}

/// Largest violation of oracle ≤ exact ≤ bound over the grid, relative.
pub fn rdp_chain_violation(rows: &[RdpRow]) -> f64 {
    rows.iter()
        .map(|r| {
            let a = (r.oracle - r.exact) / r.exact.max(1e-300);
            let b = (r.exact - r.bound) / r.bound;
            a.max(b).max(0.0)
        })
        .fold(0.0, f64::max)
}

/// Seed-mean f(Θ_τ) − f* minus theorem2_bound(τ) at the idle solution, as a
/// fraction of the bound (≤ 0 when the ordering holds).
pub fn theorem2_excess(res: &Resolved) -> Result<f64> {
    let plan = plan_run(res, StrategySpec::Idle)?;
    let runs = train(res, &plan, &seeds(res))?;
    let mean = runs.iter().filter_map(TrainResult::final_weighted_loss).sum::<f64>() / runs.len() as f64;
    let ctx = convergence::ChannelContext::expected(
        Strategy::Idle,
        plan.rho,
        &res.channel,
        res.config.power,
        res.config.grad_bound,
        true,
    )?;
    let bound = convergence::theorem2_bound(plan.tau, plan.rho, &res.learning, &ctx)?;
    Ok((mean - bound) / bound)
}

pub fn validate(res: &Resolved) -> Result<Vec<Check>> {
    let cfg = &res.optimizer;
    let mut out = Vec::new();
    let idle = optimizer::two_stage_optimize(Strategy::Idle, cfg)?;
    out.push(check("channel_mc_rel_err", channel_mc_error(cfg, idle.rho_opt, 1_000_000, res.config.seed)?, 0.01));
    for s in STRATEGIES {
        out.push(check(&format!("rho_gamma_{}_rel_gap", s.name()), rho_gamma_gap(s, cfg)?, 1e-4));
    }
    let mid = (idle.feasible.tau_min + idle.feasible.tau_max) / 2;
    match rho_opt_idle_gap(mid, cfg) {
        Ok(g) => out.push(check("rho_opt_idle_rel_gap", g, 1e-4)),
        Err(e) => {
            warn!("rho_opt_idle at tau={mid}: {e}");
            out.push(Check { name: "rho_opt_idle_rel_gap".into(), measured: f64::NAN, tolerance: 1e-4, pass: false });
        }
    }
    let grid = default_rdp_grid()?;
    out.push(check("rdp_chain_violation", rdp_chain_violation(&grid), 1e-9));
    for s in STRATEGIES {
        let t = optimizer::tau_eps_max(s, cfg)?;
        let pp = cfg.privacy(Objective::Cdpb(s), cfg.rho_cap())?;
        let ok = rdp::theorem1_total_eps(t as u64, &pp)? <= cfg.eps_bar
            && rdp::theorem1_total_eps(t as u64 + 1, &pp)? > cfg.eps_bar;
        out.push(Check {
            name: format!("tau_eps_max_inversion_{}", s.name()),
            measured: if ok { 0.0 } else { 1.0 },
            tolerance: 0.0,
            pass: ok,
        });
    }
    out.push(check("theorem2_excess", theorem2_excess(res)?, 0.0));
    Ok(out)
}
