//! Two-stage choice of the power-balancing parameter ρ and iteration budget τ.
//!
//! Stage I bounds τ from below by the convergence target γ̄ and from above by
//! the privacy budget ε̄. Stage II minimizes 𝒢(ρ, τ) = λ₁γ + λ₂ε for each τ in
//! that range and keeps the best pair.

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

use crate::channel::{self, ChannelParams, GainDraw, Strategy};
use crate::convergence::{self, ChannelContext, LearningParams};
use crate::error::{Error, Result};
use crate::par;
use crate::rdp::{self, PrivacyParams};
use crate::search::{self, Minimum};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma_bar: f64,
    pub eps_bar: f64,
    pub power: f64,
    pub grad_bound: f64,
    pub alpha: u32,
    pub channel: ChannelParams,
    pub learning: LearningParams,
    /// Bisection tolerance Ψ.
    pub psi: f64,
    /// Bisection iteration cap N_max.
    pub max_iters: usize,
    /// false: replace the closed-form ρ rules by numerical minimization,
    /// which also covers per-client σ².
    pub closed_form: bool,
}

/// Which noise model the objective is evaluated under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Cdpb(Strategy),
    /// Artificial noise switched off; only channel AWGN protects privacy.
    NoiseFree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeasibleSet {
    pub tau_min: usize,
    pub tau_max: usize,
}

impl FeasibleSet {
    pub fn len(&self) -> usize {
        self.tau_max + 1 - self.tau_min
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, tau: usize) -> bool {
        (self.tau_min..=self.tau_max).contains(&tau)
    }
}

/// Stage-II result for one τ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauPoint {
    pub tau: usize,
    pub rho: f64,
    pub utility: f64,
    pub gamma: f64,
    pub eps: f64,
    /// ρ_τ was moved to satisfy γ ≤ γ̄ and ε ≤ ε̄.
    pub constrained: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerBalanceSolution {
    pub strategy: Strategy,
    pub rho_opt: f64,
    pub tau_opt: usize,
    pub utility: f64,
    pub gamma: f64,
    pub eps: f64,
    pub feasible: FeasibleSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    GammaBased,
    HMinBased,
    IsBased,
    NoiseFree,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [Baseline::GammaBased, Baseline::HMinBased, Baseline::IsBased, Baseline::NoiseFree];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::GammaBased => "gamma_based",
            Baseline::HMinBased => "h_min_based",
            Baseline::IsBased => "is_based",
            Baseline::NoiseFree => "noise_free",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.name() == s)
    }
}

const GRID: usize = 400;

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        self.channel.validate()?;
        self.learning.validate()?;
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::param("lambda1/lambda2", "must be nonnegative"));
        }
        if !(self.lambda1 + self.lambda2 > 0.0) {
            return Err(Error::param("lambda1/lambda2", "at least one must be positive"));
        }
        for (name, v) in [
            ("gamma_bar", self.gamma_bar),
            ("eps_bar", self.eps_bar),
            ("power", self.power),
            ("grad_bound", self.grad_bound),
            ("psi", self.psi),
        ] {
            if !(v > 0.0) {
                return Err(Error::param(name, format!("must be positive, got {v}")));
            }
        }
        if self.alpha < 2 {
            return Err(Error::param("alpha", format!("must be an integer >= 2, got {}", self.alpha)));
        }
        if self.max_iters == 0 {
            return Err(Error::param("max_iters", "must be >= 1"));
        }
        if self.closed_form {
            self.sigma2()?;
        }
        Ok(())
    }

    pub fn rho_cap(&self) -> f64 {
        channel::rho_cap(self.power, self.grad_bound)
    }

    fn rho_floor(&self) -> f64 {
        1e-9 * self.rho_cap()
    }

    fn sigma2(&self) -> Result<f64> {
        self.channel.homogeneous_sigma2().ok_or_else(|| {
            Error::param("sigma2", "closed forms assume one common sigma2 across clients")
        })
    }

    fn k(&self) -> f64 {
        self.channel.num_clients() as f64
    }

    fn m2g(&self) -> f64 {
        let l = &self.learning;
        4.0 * l.smoothness * l.smoothness * l.grad_sq_bound
    }

    /// Worst-case (largest) per-client participation probability at ρ.
    fn participation(&self, rho: f64) -> Result<f64> {
        let mut best: f64 = 0.0;
        for s in &self.channel.sigma2 {
            best = best.max(channel::participation_probability(rho, self.power, self.grad_bound, *s)?);
        }
        Ok(best)
    }

    /// Channel context in optimizer mode (artificial noise only).
    pub fn context(&self, obj: Objective, rho: f64) -> Result<ChannelContext> {
        match obj {
            Objective::Cdpb(s) => ChannelContext::expected(s, rho, &self.channel, self.power, self.grad_bound, false),
            Objective::NoiseFree => Ok(ChannelContext {
                kt: channel::expected_participants(rho, &self.channel, self.power, self.grad_bound)?,
                sigma_q2: 0.0,
            }),
        }
    }

    /// Privacy parameters charged per round at ρ.
    pub fn privacy(&self, obj: Objective, rho: f64) -> Result<PrivacyParams> {
        let noise = match obj {
            Objective::Cdpb(s) => channel::expected_noise_power(s, rho, &self.channel, self.power, self.grad_bound)?,
            Objective::NoiseFree => self.channel.awgn_var,
        };
        Ok(PrivacyParams::new(self.alpha as f64, self.grad_bound, noise, self.participation(rho)?))
    }

    fn gamma_eps(&self, obj: Objective, rho: f64, tau: usize) -> Result<(f64, f64)> {
        let ctx = self.context(obj, rho)?;
        let gamma = convergence::gamma_approx(tau, rho, &self.learning, &ctx)?;
        let pp = self.privacy(obj, rho)?;
        let eps = if pp.noise_var > 0.0 { rdp::theorem1_total_eps(tau as u64, &pp)? } else { f64::INFINITY };
        Ok((gamma, eps))
    }

    fn objective(&self, obj: Objective, rho: f64, tau: usize) -> Result<f64> {
        let (g, e) = self.gamma_eps(obj, rho, tau)?;
        Ok(self.lambda1 * g + self.lambda2 * e)
    }

    fn objective_or_inf(&self, obj: Objective, rho: f64, tau: usize) -> f64 {
        self.objective(obj, rho, tau).unwrap_or(f64::INFINITY)
    }
}

/// 𝒢(ρ, τ) = λ₁·gamma_approx + λ₂·theorem1_total_eps, artificial noise only.
pub fn utility(rho: f64, tau: usize, strategy: Strategy, cfg: &OptimizerConfig) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(Error::param("rho", format!("must be positive, got {rho}")));
    }
    if tau == 0 {
        return Err(Error::param("tau", "must be >= 1"));
    }
    cfg.objective(Objective::Cdpb(strategy), rho, tau)
}

pub fn utility_noise_free(rho: f64, tau: usize, cfg: &OptimizerConfig) -> Result<f64> {
    cfg.objective(Objective::NoiseFree, rho, tau)
}

/// Closed-form ρ_γ minimizing the bracketed convergence term.
pub fn rho_gamma(strategy: Strategy, cfg: &OptimizerConfig) -> Result<f64> {
    if !cfg.closed_form {
        return Ok(rho_gamma_numeric(strategy, cfg));
    }
    let s2 = cfg.sigma2()?;
    let (p, w) = (cfg.power, cfg.grad_bound);
    let w2 = w * w;
    let rho = match strategy {
        Strategy::Noisy => {
            let an = cfg.m2g() - w2;
            if an <= -2.0 {
                return Err(Error::param("grad_sq_bound", format!("4M^2G - W^2 = {an} <= -2")));
            }
            p * s2 * ((4.0 * an + 9.0).sqrt() - 1.0) / (w2 * (an + 2.0))
        }
        Strategy::Idle => {
            let ai = cfg.m2g() / w2;
            p * s2 * ((4.0 * ai + 1.0).sqrt() - 1.0) / (ai * w2)
        }
    };
    if !(rho > 0.0) {
        return Err(Error::NonConvergence(format!("rho_gamma evaluated to {rho}")));
    }
    let cap = cfg.rho_cap();
    if rho > cap {
        warn!("rho_gamma {rho} exceeds P/W^2 = {cap}; clamped");
        return Ok(cap);
    }
    Ok(rho)
}

/// Grid + golden-section minimizer of the bracketed convergence term.
pub fn rho_gamma_numeric(strategy: Strategy, cfg: &OptimizerConfig) -> f64 {
    let obj = Objective::Cdpb(strategy);
    let f = |x: f64| {
        cfg.context(obj, x)
            .and_then(|ctx| convergence::gamma_approx(1, x, &cfg.learning, &ctx))
            .unwrap_or(f64::INFINITY)
    };
    let cap = cfg.rho_cap();
    search::robust_minimize(f, cfg.rho_floor(), cap, GRID, 1e-12 * cap).x
}

/// Smallest τ meeting γ̄ at ρ_γ (at least 1).
pub fn tau_gamma_min(strategy: Strategy, cfg: &OptimizerConfig) -> Result<usize> {
    let rho = rho_gamma(strategy, cfg)?;
    let ctx = cfg.context(Objective::Cdpb(strategy), rho)?;
    let g1 = convergence::gamma_approx(1, rho, &cfg.learning, &ctx)?;
    let t = (g1 / cfg.gamma_bar).ceil();
    Ok(if t.is_finite() && t >= 1.0 { t.min(usize::MAX as f64 / 2.0) as usize } else { 1 })
}

/// Largest τ whose composed ε at ρ = P/W² stays within ε̄.
pub fn tau_eps_max(strategy: Strategy, cfg: &OptimizerConfig) -> Result<usize> {
    let pp = cfg.privacy(Objective::Cdpb(strategy), cfg.rho_cap())?;
    let per = rdp::subsampled_round_eps_bound(&pp)?;
    if !(per > 0.0) {
        return Err(Error::NonConvergence(format!("per-round eps {per} is not positive")));
    }
    let total = |t: usize| rdp::theorem1_total_eps(t as u64, &pp);
    let guess = (cfg.eps_bar / per).floor();
    let mut t = if guess.is_finite() { guess.min(1e15) as usize } else { usize::MAX / 4 };
    while t > 0 && total(t)? > cfg.eps_bar {
        t -= 1;
    }
    while total(t + 1)? <= cfg.eps_bar {
        t += 1;
    }
    if t < 1 {
        return Err(Error::Infeasible { tau_min: 1, tau_max: 0 });
    }
    Ok(t)
}

pub fn feasible_set(strategy: Strategy, cfg: &OptimizerConfig) -> Result<FeasibleSet> {
    let tau_min = tau_gamma_min(strategy, cfg)?;
    let tau_max = match tau_eps_max(strategy, cfg) {
        Ok(t) => t,
        Err(Error::Infeasible { .. }) => {
            return Err(Error::Infeasible { tau_min: tau_min as i64, tau_max: 0 });
        }
        Err(e) => return Err(e),
    };
    if tau_min > tau_max {
        return Err(Error::Infeasible {
            tau_min: tau_min as i64,
            tau_max: tau_max as i64,
        });
    }
    Ok(FeasibleSet { tau_min, tau_max })
}

/// Closed-form ρ_τ for idle unreliable clients, with K_t resolved by
/// fixed-point iteration from K_t = K.
pub fn rho_opt_idle(tau: usize, cfg: &OptimizerConfig) -> Result<f64> {
    if tau == 0 {
        return Err(Error::param("tau", "must be >= 1"));
    }
    let s2 = cfg.sigma2()?;
    let (p, w) = (cfg.power, cfg.grad_bound);
    let w2 = w * w;
    let (l1, l2) = (cfg.lambda1, cfg.lambda2);
    let c = w2 * (cfg.alpha as f64 - 1.0) / (2.0 * p * s2);
    let t2 = (tau as f64).powi(2);
    let cap = cfg.rho_cap();
    let mut kt = cfg.k();
    let mut prev: Option<f64> = None;
    for _ in 0..100 {
        // a/(c+b−1) with numerator and denominator scaled by λ₂τ²K_t
        let num = l1 / w2;
        let den = l2 * t2 * kt * (c - 1.0) + l1 * cfg.m2g();
        if den <= 0.0 {
            let radicand = if l2 > 0.0 { den / (l2 * t2 * kt) } else { den };
            return Err(Error::NonPositiveRadicand { value: radicand });
        }
        let mut rho = 2.0 * p * s2 / w2 * (num / den).sqrt();
        if rho > cap {
            rho = cap;
        }
        rho = rho.max(cfg.rho_floor());
        kt = channel::expected_participants(rho, &cfg.channel, p, w)?;
        if let Some(r0) = prev {
            if (rho - r0).abs() < 1e-9 {
                if rho >= cap {
                    debug!("closed-form rho at tau={tau} reaches P/W^2; clamped");
                }
                return Ok(rho);
            }
        }
        prev = Some(rho);
    }
    Err(Error::NonConvergence(format!("K_t fixed point for tau={tau} did not settle in 100 iterations")))
}

fn derivative(cfg: &OptimizerConfig, obj: Objective, rho: f64, tau: usize) -> f64 {
    let h = 1e-6 * cfg.rho_cap();
    let (lo, hi) = (cfg.rho_floor(), cfg.rho_cap());
    let f = |x: f64| cfg.objective_or_inf(obj, x, tau);
    if rho - h < lo {
        (f(rho + h) - f(rho)) / h
    } else if rho + h > hi {
        (f(rho) - f(rho - h)) / h
    } else {
        (f(rho + h) - f(rho - h)) / (2.0 * h)
    }
}

/// ρ_τ for noisy unreliable clients: bisection on the sign of d𝒢/dρ.
pub fn rho_opt_noisy(tau: usize, cfg: &OptimizerConfig) -> Result<f64> {
    if tau == 0 {
        return Err(Error::param("tau", "must be >= 1"));
    }
    let obj = Objective::Cdpb(Strategy::Noisy);
    let (lo, hi) = (cfg.rho_floor(), cfg.rho_cap());
    let gl = derivative(cfg, obj, lo, tau);
    let gh = derivative(cfg, obj, hi, tau);
    if gl < 0.0 && gh > 0.0 {
        let r = search::bisect_sign(|x| derivative(cfg, obj, x, tau), lo, hi, cfg.psi, cfg.max_iters)?;
        return Ok(r.x);
    }
    let (ul, uh) = (cfg.objective_or_inf(obj, lo, tau), cfg.objective_or_inf(obj, hi, tau));
    Ok(if uh <= ul { hi } else { lo })
}

/// Numerical minimizer of the objective over ρ at fixed τ (grid + golden
/// section). Serves as the oracle for the closed forms and as the fallback.
pub fn rho_numeric(obj: Objective, tau: usize, cfg: &OptimizerConfig) -> Minimum {
    let cap = cfg.rho_cap();
    search::robust_minimize(|x| cfg.objective_or_inf(obj, x, tau), cfg.rho_floor(), cap, GRID, 1e-12 * cap)
}

/// The ρ interval on which γ ≤ γ̄ and ε ≤ ε̄ hold at τ, or None when empty.
pub fn constraint_interval(strategy: Strategy, tau: usize, cfg: &OptimizerConfig) -> Option<(f64, f64)> {
    let obj = Objective::Cdpb(strategy);
    let ok = |x: f64| match cfg.gamma_eps(obj, x, tau) {
        Ok((g, e)) => g <= cfg.gamma_bar && e <= cfg.eps_bar,
        Err(_) => false,
    };
    let (lo, cap) = (cfg.rho_floor(), cfg.rho_cap());
    let h = (cap - lo) / (GRID - 1) as f64;
    let xs: Vec<f64> = (0..GRID).map(|i| if i == GRID - 1 { cap } else { lo + h * i as f64 }).collect();
    let flags: Vec<bool> = xs.iter().map(|x| ok(*x)).collect();
    let first = flags.iter().position(|f| *f)?;
    let last = flags.iter().rposition(|f| *f)?;
    let refine = |mut good: f64, mut bad: f64| {
        for _ in 0..60 {
            let m = 0.5 * (good + bad);
            if ok(m) {
                good = m;
            } else {
                bad = m;
            }
        }
        good
    };
    let a = if first > 0 { refine(xs[first], xs[first - 1]) } else { xs[first] };
    let b = if last + 1 < GRID { refine(xs[last], xs[last + 1]) } else { xs[last] };
    Some((a, b))
}

/// Unconstrained per-τ ρ as the two-stage search would choose it.
pub fn rho_tau(strategy: Strategy, tau: usize, cfg: &OptimizerConfig) -> Result<f64> {
    match strategy {
        Strategy::Noisy => rho_opt_noisy(tau, cfg),
        Strategy::Idle if !cfg.closed_form => Ok(rho_numeric(Objective::Cdpb(Strategy::Idle), tau, cfg).x),
        Strategy::Idle => match rho_opt_idle(tau, cfg) {
            Ok(r) => Ok(r),
            Err(Error::NonPositiveRadicand { .. }) | Err(Error::NonConvergence(_)) => {
                Ok(rho_numeric(Objective::Cdpb(Strategy::Idle), tau, cfg).x)
            }
            Err(e) => Err(e),
        },
    }
}

fn stage_two_point(strategy: Strategy, tau: usize, cfg: &OptimizerConfig) -> Result<Option<TauPoint>> {
    let obj = Objective::Cdpb(strategy);
    let Some((lo, hi)) = constraint_interval(strategy, tau, cfg) else {
        return Ok(None);
    };
    let free = rho_tau(strategy, tau, cfg)?;
    let rho = free.clamp(lo, hi);
    let (gamma, eps) = cfg.gamma_eps(obj, rho, tau)?;
    Ok(Some(TauPoint {
        tau,
        rho,
        utility: cfg.lambda1 * gamma + cfg.lambda2 * eps,
        gamma,
        eps,
        constrained: rho != free,
    }))
}

/// Stage II over every τ in 𝒯. Points whose constraint interval is empty
/// are left out.
pub fn stage_two_curve(strategy: Strategy, cfg: &OptimizerConfig) -> Result<(FeasibleSet, Vec<TauPoint>)> {
    let fs = feasible_set(strategy, cfg)?;
    let pts = par::map_range(fs.len(), |i| stage_two_point(strategy, fs.tau_min + i, cfg));
    let mut out = Vec::with_capacity(pts.len());
    for p in pts {
        if let Some(p) = p? {
            out.push(p);
        }
    }
    Ok((fs, out))
}

fn better(a: &TauPoint, b: &TauPoint) -> Ordering {
    a.utility
        .total_cmp(&b.utility)
        .then(a.tau.cmp(&b.tau))
        .then(a.rho.total_cmp(&b.rho))
}

pub fn two_stage_optimize(strategy: Strategy, cfg: &OptimizerConfig) -> Result<PowerBalanceSolution> {
    cfg.validate()?;
    let (fs, pts) = stage_two_curve(strategy, cfg)?;
    let best = pts.iter().min_by(|a, b| better(a, b)).ok_or(Error::Infeasible {
        tau_min: fs.tau_min as i64,
        tau_max: fs.tau_max as i64,
    })?;
    if best.constrained {
        warn!("{} optimum at tau={} sits on a constraint boundary", strategy.name(), best.tau);
    }
    Ok(PowerBalanceSolution {
        strategy,
        rho_opt: best.rho,
        tau_opt: best.tau,
        utility: best.utility,
        gamma: best.gamma,
        eps: best.eps,
        feasible: fs,
    })
}

/// ρ used by a baseline. `tau` is the iteration count the baseline runs for
/// (noise-free search), `gains` the round's draw (h_min rule).
pub fn baseline_rho(baseline: Baseline, cfg: &OptimizerConfig, tau: usize, gains: Option<&GainDraw>) -> Result<f64> {
    match baseline {
        Baseline::GammaBased => rho_gamma(Strategy::Idle, cfg),
        Baseline::HMinBased => {
            let g = gains.ok_or_else(|| Error::param("gains", "h_min rule needs a gain draw"))?;
            let h = g.min_gain();
            if !(h > 0.0) {
                return Err(Error::param("gains", "minimum gain is zero"));
            }
            Ok(cfg.power * h / (cfg.grad_bound * cfg.grad_bound))
        }
        Baseline::IsBased => Ok(two_stage_optimize(Strategy::Idle, cfg)?.rho_opt),
        Baseline::NoiseFree => Ok(rho_numeric(Objective::NoiseFree, tau.max(1), cfg).x),
    }
}
