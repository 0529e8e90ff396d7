//! Acceptance criteria, one test each. Every test prints a single
//! `[PASS]`/`[FAIL]` line with the measured values.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use cdpb_core::channel::{ChannelParams, Strategy};
use cdpb_core::config::{Resolved, SystemConfig};
use cdpb_core::convergence::{self, ChannelContext, LearningParams};
use cdpb_core::engine::StrategySpec;
use cdpb_core::experiment::{self, Axis, SweepRow};
use cdpb_core::optimizer::{self, Baseline, Objective, OptimizerConfig};
use cdpb_core::rdp::{self, PrivacyParams};
use cdpb_core::search;

fn resolved() -> &'static Resolved {
    static R: OnceLock<Resolved> = OnceLock::new();
    R.get_or_init(|| SystemConfig::default().resolve().expect("default config resolves"))
}

fn report(name: &str, pass: bool, detail: String) {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

fn within(start: Instant, limit: Duration) -> (bool, String) {
    let e = start.elapsed();
    (e < limit, format!("{:.2}s of {}s", e.as_secs_f64(), limit.as_secs()))
}

fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}

fn grid_cfg(m: f64, g: f64, s2: f64) -> OptimizerConfig {
    let mut c = resolved().optimizer.clone();
    let mu = 0.5 * m;
    c.learning = LearningParams {
        smoothness: m,
        mu,
        grad_sq_bound: g,
        schedule_offset: convergence::default_schedule_offset(m, mu, 1),
        ..c.learning
    };
    c.channel = ChannelParams::homogeneous(c.channel.num_clients(), s2, c.channel.awgn_var).unwrap();
    c
}

#[test]
fn c01_closed_forms_match_numerical_oracle() {
    let start = Instant::now();
    let mut worst_gamma: f64 = 0.0;
    let mut worst_idle: f64 = 0.0;
    let mut failures = Vec::new();
    for m in [0.5, 1.0, 2.0] {
        for g in [0.018, 0.036, 0.072] {
            for s2 in [0.25, 0.5, 1.0] {
                let cfg = grid_cfg(m, g, s2);
                for s in [Strategy::Idle, Strategy::Noisy] {
                    let gap = experiment::rho_gamma_gap(s, &cfg).unwrap_or(f64::INFINITY);
                    worst_gamma = worst_gamma.max(gap);
                    if !(gap <= 1e-4) {
                        failures.push(format!("rho_gamma {} (M={m},G={g},s2={s2}) gap {gap:.2e}", s.name()));
                    }
                }
                let lo = optimizer::tau_gamma_min(Strategy::Idle, &cfg).unwrap_or(1);
                let hi = optimizer::tau_eps_max(Strategy::Idle, &cfg).unwrap_or(lo);
                let tau = ((lo + hi.max(lo)) / 2).max(1);
                let cap = cfg.rho_cap();
                let oracle = search::robust_minimize(
                    |x| optimizer::utility(x, tau, Strategy::Idle, &cfg).unwrap_or(f64::INFINITY),
                    1e-9 * cap,
                    cap,
                    10_000,
                    1e-13 * cap,
                )
                .x;
                let gap = match optimizer::rho_opt_idle(tau, &cfg) {
                    Ok(r) => rel(r, oracle),
                    Err(e) => {
                        failures.push(format!("rho_opt_idle (M={m},G={g},s2={s2}) tau={tau}: {e}"));
                        f64::INFINITY
                    }
                };
                worst_idle = worst_idle.max(gap);
                if gap.is_finite() && gap > 1e-4 {
                    failures.push(format!("rho_opt_idle (M={m},G={g},s2={s2}) tau={tau} gap {gap:.2e}"));
                }
            }
        }
    }
    let (fast, t) = within(start, Duration::from_secs(10));
    let pass = failures.is_empty() && fast;
    let mut detail = format!(
        "worst rho_gamma gap {worst_gamma:.3e}, worst rho_opt_idle gap {worst_idle:.3e} (tol 1e-4), {} of 81 fail, {t}",
        failures.len()
    );
    for f in failures.iter().take(6) {
        detail.push_str("\n    ");
        detail.push_str(f);
    }
    report("closed forms vs oracle (27-point grid)", pass, detail);
}

#[test]
fn c02_channel_statistics_monte_carlo() {
    let start = Instant::now();
    let cfg = &resolved().optimizer;
    let cap = cfg.rho_cap();
    let mut worst: f64 = 0.0;
    for (i, f) in [0.1, 0.3, 0.5, 0.7, 1.0].iter().enumerate() {
        worst = worst.max(experiment::channel_mc_error(cfg, f * cap, 1_000_000, 100 + i as u64).unwrap());
    }
    let (fast, t) = within(start, Duration::from_secs(30));
    report(
        "channel statistics Monte-Carlo (1e6 draws, 5 rho)",
        worst <= 0.01 && fast,
        format!("max rel err {worst:.4e} (tol 1e-2), {t}"),
    );
}

#[test]
fn c03_rdp_ordering_chain() {
    let start = Instant::now();
    let ps: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let rows = experiment::rdp_grid(&[2, 3, 4, 5, 6, 7, 8], &ps, &[0.01, 0.1, 0.5]).unwrap();
    let chain_bad = rows.iter().filter(|r| !(r.oracle <= r.exact && r.exact <= r.bound)).count();
    let mut t1: f64 = 0.0;
    for r in &rows {
        let pp = PrivacyParams::new(r.alpha as f64, 1.0, 1.0 / r.snr, r.p);
        for tau in [1u64, 7, 100, 1000] {
            let total = rdp::theorem1_total_eps(tau, &pp).unwrap();
            let per = rdp::subsampled_round_eps_bound(&pp).unwrap();
            t1 = t1.max(rel(total, tau as f64 * per));
        }
    }
    let (fast, t) = within(start, Duration::from_secs(60));
    report(
        "RDP ordering chain oracle <= exact <= bound",
        chain_bad == 0 && t1 <= 1e-12 && fast,
        format!("{} grid points, {chain_bad} violations, total eps vs tau*bound rel {t1:.2e} (tol 1e-12), {t}", rows.len()),
    );
}

#[test]
fn c04_tau_eps_max_inversion() {
    let cfg = &resolved().optimizer;
    let mut parts = Vec::new();
    let mut pass = true;
    for s in [Strategy::Idle, Strategy::Noisy] {
        let t = optimizer::tau_eps_max(s, cfg).unwrap();
        let pp = cfg.privacy(Objective::Cdpb(s), cfg.rho_cap()).unwrap();
        let at = rdp::theorem1_total_eps(t as u64, &pp).unwrap();
        let next = rdp::theorem1_total_eps(t as u64 + 1, &pp).unwrap();
        let ok = at <= cfg.eps_bar && next > cfg.eps_bar;
        pass &= ok;
        parts.push(format!("{}: eps({t})={at:.4} eps({})={next:.4}", s.name(), t + 1));
    }
    report("tau_eps_max inversion", pass, format!("{} vs eps_bar={}", parts.join(", "), cfg.eps_bar));
}

#[test]
fn c05_theorem2_ordering() {
    let start = Instant::now();
    let res = resolved();
    let seeds = experiment::seeds(res);
    let mut pass = true;
    let mut parts = Vec::new();
    for s in [Strategy::Idle, Strategy::Noisy] {
        let plan = experiment::plan_run(res, StrategySpec::cdpb(s)).unwrap();
        let runs = experiment::train(res, &plan, &seeds).unwrap();
        let mean = runs.iter().map(|r| r.final_weighted_loss().unwrap()).sum::<f64>() / runs.len() as f64;
        let ctx = ChannelContext::expected(s, plan.rho, &res.channel, res.config.power, res.config.grad_bound, true)
            .unwrap();
        let bound = convergence::theorem2_bound(plan.tau, plan.rho, &res.learning, &ctx).unwrap();
        pass &= mean <= bound;
        parts.push(format!("{} tau={} mean {mean:.4e} <= bound {bound:.4e}", s.name(), plan.tau));
    }
    let (fast, t) = within(start, Duration::from_secs(300));
    report("seed-mean loss below convergence bound (20 seeds)", pass && fast, format!("{}, {t}", parts.join("; ")));
}

#[test]
fn c06_utility_decreasing_in_tau() {
    let cfg = &resolved().optimizer;
    let mut pass = true;
    let mut parts = Vec::new();
    let mut best = Vec::new();
    for s in [Strategy::Idle, Strategy::Noisy] {
        let (fs, pts) = optimizer::stage_two_curve(s, cfg).unwrap();
        let complete = pts.len() == fs.len();
        let rises: Vec<usize> =
            pts.windows(2).filter(|w| !(w[1].utility < w[0].utility)).map(|w| w[1].tau).collect();
        let ok = complete && rises.is_empty();
        pass &= ok;
        let argmin = pts.iter().min_by(|a, b| a.utility.total_cmp(&b.utility)).unwrap();
        parts.push(format!(
            "{} T=[{},{}] points {}/{}, {} non-decreasing steps (first at tau={:?}), argmin tau={}",
            s.name(),
            fs.tau_min,
            fs.tau_max,
            pts.len(),
            fs.len(),
            rises.len(),
            rises.first(),
            argmin.tau
        ));
        best.push(optimizer::two_stage_optimize(s, cfg).unwrap().utility);
    }
    let order = best[0] <= best[1];
    parts.push(format!("utility idle {:.6e} <= noisy {:.6e}: {order}", best[0], best[1]));
    report("utility decreasing in tau over T, idle <= noisy", pass && order, parts.join("; "));
}

fn metric(rows: &[SweepRow], x: f64, strategy: &str, m: &str) -> Option<f64> {
    rows.iter().find(|r| r.axis_value == x && r.strategy == strategy && r.metric == m).map(|r| r.value)
}

#[test]
fn c07_disparity_trends() {
    let res = resolved();
    let ks = [10.0, 25.0, 50.0, 100.0];
    let ps = [0.5, 1.0, 2.0, 4.0];
    let k_rows = experiment::sweep(res, Axis::K, Some(ks.to_vec())).unwrap();
    let p_rows = experiment::sweep(res, Axis::Power, Some(ps.to_vec())).unwrap();
    let card: Vec<Option<f64>> = ks.iter().map(|k| metric(&k_rows, *k, "disparity", "card")).collect();
    let uk: Vec<Option<f64>> = ks.iter().map(|k| metric(&k_rows, *k, "disparity", "utility")).collect();
    let up: Vec<Option<f64>> = ps.iter().map(|p| metric(&p_rows, *p, "disparity", "utility")).collect();
    let all = |v: &[Option<f64>]| v.iter().copied().collect::<Option<Vec<f64>>>();
    let nonneg = |v: &[f64]| v.iter().all(|x| *x >= 0.0);
    let nonincr = |v: &[f64]| v.windows(2).all(|w| w[1] <= w[0]);
    let nondecr = |v: &[f64]| v.windows(2).all(|w| w[1] >= w[0]);
    let c = all(&card).map(|v| nonneg(&v) && nonincr(&v));
    let k = all(&uk).map(|v| nonneg(&v) && nonincr(&v));
    let p = all(&up).map(|v| nonneg(&v) && nondecr(&v));
    let pass = c == Some(true) && k == Some(true) && p == Some(true);
    report(
        "disparity trends over K and P",
        pass,
        format!("|T| disparity over K {card:?}; utility disparity over K {uk:?}; over P {up:?}"),
    );
}

#[test]
fn c08_mixed_endpoints_bit_identical() {
    let res = resolved();
    let seeds = experiment::seeds(res);
    let base = experiment::plan_run(res, StrategySpec::Idle).unwrap();
    let run = |s| experiment::train(res, &experiment::RunPlan { strategy: s, ..base }, &seeds).unwrap();
    let bits = |runs: &Vec<cdpb_core::engine::TrainResult>| {
        runs.iter()
            .flat_map(|r| r.trace.iter().flat_map(|t| [t.loss_current.to_bits(), t.loss_weighted.to_bits(), t.sigma_q2_realized.to_bits()]))
            .collect::<Vec<u64>>()
    };
    let (i, n) = (run(StrategySpec::Idle), run(StrategySpec::Noisy));
    let (m0, m1) = (run(StrategySpec::Mixed(0.0)), run(StrategySpec::Mixed(1.0)));
    let eps = |r: &Vec<cdpb_core::engine::TrainResult>| r.iter().map(|x| x.eps().to_bits()).collect::<Vec<u64>>();
    let a = bits(&m0) == bits(&i) && eps(&m0) == eps(&i);
    let b = bits(&m1) == bits(&n) && eps(&m1) == eps(&n);
    report(
        "mixed(0) == idle and mixed(1) == noisy, bit-identical",
        a && b,
        format!("mixed(0)==idle: {a}, mixed(1)==noisy: {b} over {} seeds x {} rounds", seeds.len(), base.tau),
    );
}

#[test]
fn c09_budget_closure() {
    let res = resolved();
    let seeds = experiment::seeds(res);
    let (eps_bar, slack) = (res.config.eps_bar, 10.0 * res.config.gamma_bar);
    let mut pass = true;
    let mut parts = Vec::new();
    for s in [Strategy::Idle, Strategy::Noisy] {
        let plan = experiment::plan_run(res, StrategySpec::cdpb(s)).unwrap();
        let runs = experiment::train(res, &plan, &seeds).unwrap();
        let eps = experiment::median(&runs.iter().map(|r| r.eps()).collect::<Vec<_>>());
        let loss = experiment::median(&runs.iter().map(|r| r.final_weighted_loss().unwrap()).collect::<Vec<_>>());
        pass &= eps <= eps_bar && loss <= slack;
        parts.push(format!("{}: eps {eps:.3} <= {eps_bar}, loss {loss:.3e} <= {slack}", s.name()));
    }
    report("budget closure (20-seed medians)", pass, parts.join("; "));
}

#[test]
fn c10_noise_free_extremes() {
    let res = resolved();
    let seeds = experiment::seeds(res);
    let strategies = [
        StrategySpec::Idle,
        StrategySpec::Noisy,
        StrategySpec::Mixed(0.5),
        StrategySpec::Baseline(Baseline::GammaBased),
        StrategySpec::Baseline(Baseline::HMinBased),
        StrategySpec::Baseline(Baseline::IsBased),
        StrategySpec::Baseline(Baseline::NoiseFree),
    ];
    let stats: Vec<(String, f64, f64)> = strategies
        .iter()
        .map(|s| {
            let plan = experiment::plan_run(res, *s).unwrap();
            let runs = experiment::train(res, &plan, &seeds).unwrap();
            let loss = experiment::median(&runs.iter().map(|r| r.final_weighted_loss().unwrap()).collect::<Vec<_>>());
            let eps = experiment::median(&runs.iter().map(|r| r.eps()).collect::<Vec<_>>());
            (s.to_string(), loss, eps)
        })
        .collect();
    let (nf, others) = stats.split_last().unwrap();
    let lowest = others.iter().all(|o| nf.1 < o.1);
    let highest = others.iter().all(|o| nf.2 > o.2);
    let detail = stats.iter().map(|(n, l, e)| format!("{n} loss {l:.3e} eps {e:.3}")).collect::<Vec<_>>().join("; ");
    report("noise-free: strictly lowest loss and highest eps", lowest && highest, detail);
}
