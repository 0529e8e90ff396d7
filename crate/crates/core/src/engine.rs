//! FedAvg over a fading multiple-access channel with power balancing.
//!
//! Each round: draw gains, let clients above the threshold run L local
//! steps, build the transmit plan, superpose everything at the server,
//! update the model and charge the privacy ledger.

use std::fmt;
use std::str::FromStr;

use log::debug;
use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channel::{self, ChannelParams, GainDraw, Strategy};
use crate::convergence::{self, LearningParams};
use crate::error::{Error, Result};
use crate::optimizer::Baseline;
use crate::par;
use crate::rdp::{self, PrivacyParams, RdpLedger};
use crate::rng::{self, Purpose, SERVER};
use crate::task::{ModelVector, SyntheticTask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DivisorMode {
    /// Divide by the realized number of reliable clients |𝒦_t|.
    #[default]
    Realized,
    /// Divide by K_t(ρ), the expected number.
    Expected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpdateForm {
    /// Clients send θ_{k,t,L} − θ_t; the server adds the estimate.
    Displacement,
    /// Clients send the sum of their L local gradients; the server steps
    /// θ_{t+1} = θ_t − η_t·ĝ_t.
    #[default]
    RescaledGradient,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StrategySpec {
    Noisy,
    Idle,
    /// Each unreliable client flips a coin with P(noisy) = portion.
    Mixed(f64),
    Baseline(Baseline),
}

impl StrategySpec {
    pub fn cdpb(s: Strategy) -> Self {
        match s {
            Strategy::Noisy => StrategySpec::Noisy,
            Strategy::Idle => StrategySpec::Idle,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let StrategySpec::Mixed(q) = self {
            if !(0.0..=1.0).contains(q) {
                return Err(Error::param("portion", format!("must lie in [0, 1], got {q}")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for StrategySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StrategySpec::Noisy => write!(f, "noisy"),
            StrategySpec::Idle => write!(f, "idle"),
            StrategySpec::Mixed(q) => write!(f, "mixed:{q}"),
            StrategySpec::Baseline(b) => write!(f, "baseline:{}", b.name()),
        }
    }
}

impl FromStr for StrategySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::param("strategy", format!("unknown strategy '{s}'"));
        let spec = match s {
            "noisy" => StrategySpec::Noisy,
            "idle" => StrategySpec::Idle,
            _ => {
                if let Some(q) = s.strip_prefix("mixed:") {
                    StrategySpec::Mixed(q.parse().map_err(|_| bad())?)
                } else if let Some(b) = s.strip_prefix("baseline:") {
                    StrategySpec::Baseline(Baseline::parse(b).ok_or_else(bad)?)
                } else {
                    return Err(bad());
                }
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// What clients below the threshold do.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BelowThreshold {
    Noisy,
    Idle,
    Mixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Reliable,
    UnreliableNoisy,
    UnreliableIdle,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientPlan {
    pub role: Role,
    /// Pre-equalization scale a_{k,t}.
    pub scale: f64,
    /// Per-coordinate artificial-noise variance σ_r².
    pub noise_var: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransmitPlan {
    pub rho: f64,
    pub clients: Vec<ClientPlan>,
}

impl TransmitPlan {
    pub fn participants(&self) -> Vec<usize> {
        (0..self.clients.len()).filter(|k| self.clients[*k].role == Role::Reliable).collect()
    }

    /// Received artificial-noise power, Σ_rel ρdσ_r² + Σ_noisy h·dσ_r².
    pub fn noise_power(&self, gains: &GainDraw, dim: usize) -> f64 {
        let d = dim as f64;
        self.clients
            .iter()
            .zip(&gains.gains)
            .map(|(c, h)| match c.role {
                Role::Reliable => self.rho * d * c.noise_var,
                Role::UnreliableNoisy => h * d * c.noise_var,
                Role::UnreliableIdle => 0.0,
            })
            .sum()
    }
}

/// Plan inputs that stay fixed within a round.
#[derive(Debug, Clone, Copy)]
pub struct PlanSettings {
    pub rho: f64,
    pub power: f64,
    pub grad_bound: f64,
    pub dim: usize,
    pub below: BelowThreshold,
    /// false: reliable clients send no artificial noise (noise-free baseline).
    pub artificial_noise: bool,
    /// Treat every client as reliable (h_min rule, where ρ is set by the
    /// weakest client and rounding must not drop it).
    pub all_reliable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub power: f64,
    pub grad_bound: f64,
    pub alpha: u32,
    pub divisor: DivisorMode,
    pub update_form: UpdateForm,
    /// Scale every transmitted gradient to norm exactly W.
    pub normalize_to_w: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundTrace {
    pub t: usize,
    pub participants: Vec<usize>,
    pub sigma_q2_realized: f64,
    /// f(θ_{t+1}) − f(θ*).
    pub loss_current: f64,
    /// f(Θ_{t+1}) − f(θ*), Θ_{t+1} the (a+s)²-weighted mean of θ_0..θ_t.
    pub loss_weighted: f64,
    pub eps_cumulative: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub trace: Vec<RoundTrace>,
    pub theta: ModelVector,
    pub weighted_theta: ModelVector,
    pub ledger: RdpLedger,
}

impl TrainResult {
    pub fn final_weighted_loss(&self) -> Option<f64> {
        self.trace.last().map(|r| r.loss_weighted)
    }

    pub fn eps(&self) -> f64 {
        self.ledger.total_eps
    }
}

pub struct Aggregate {
    pub g_hat: ModelVector,
    pub participants: Vec<usize>,
    pub sigma_q2: f64,
}

pub fn clip_gradient(g: &ModelVector, w: f64) -> ModelVector {
    let n = g.norm();
    if n <= w { g.clone() } else { g * (w / n) }
}

fn normalize_to(g: &ModelVector, w: f64) -> ModelVector {
    let n = g.norm();
    if n > 0.0 { g * (w / n) } else { g.clone() }
}

/// L local SGD steps from θ with step η. Returns (θ_{k,t,L}, Σ_l ∇).
pub fn local_update<R: Rng + ?Sized>(
    task: &SyntheticTask,
    k: usize,
    theta: &ModelVector,
    steps: usize,
    eta: f64,
    rng: &mut R,
) -> (ModelVector, ModelVector) {
    let mut local = theta.clone();
    let mut sum = DVector::zeros(theta.len());
    for _ in 0..steps {
        let g = task.minibatch_grad(k, &local, rng);
        local -= &g * eta;
        sum += g;
    }
    (local, sum)
}

fn coin(seed: u64, round: usize, k: usize) -> f64 {
    rng::stream(seed, round as u64, k as u64, Purpose::Coin).random::<f64>()
}

/// Reliable clients (h ≥ h_th, or every client under `all_reliable`) send
/// ρ/h-scaled gradients and fill the remaining power with noise. `grads`
/// holds the transmitted vector for every reliable client.
pub fn build_transmit_plan(
    settings: &PlanSettings,
    gains: &GainDraw,
    grads: &[Option<ModelVector>],
    seed: u64,
) -> Result<TransmitPlan> {
    let PlanSettings { rho, power, grad_bound, dim, below, .. } = *settings;
    if !(rho > 0.0) {
        return Err(Error::param("rho", format!("must be positive, got {rho}")));
    }
    let h_th = channel::threshold(rho, power, grad_bound)?;
    let d = dim as f64;
    let mut clients = Vec::with_capacity(gains.gains.len());
    for (k, h) in gains.gains.iter().copied().enumerate() {
        let plan = if settings.all_reliable || h >= h_th {
            let g = grads
                .get(k)
                .and_then(|g| g.as_ref())
                .ok_or_else(|| Error::param("grads", format!("no gradient for reliable client {k}")))?;
            let noise_var = if settings.artificial_noise {
                ((power * h / rho - g.norm_squared()) / d).max(0.0)
            } else {
                0.0
            };
            ClientPlan { role: Role::Reliable, scale: rho / h, noise_var }
        } else {
            let noisy = match below {
                BelowThreshold::Noisy => true,
                BelowThreshold::Idle => false,
                BelowThreshold::Mixed(q) => coin(seed, gains.round, k) < q,
            };
            if noisy {
                ClientPlan { role: Role::UnreliableNoisy, scale: 1.0, noise_var: power / d }
            } else {
                ClientPlan { role: Role::UnreliableIdle, scale: 0.0, noise_var: 0.0 }
            }
        };
        clients.push(plan);
    }
    Ok(TransmitPlan { rho, clients })
}

fn gaussian(n: usize, sd: f64, rng: &mut impl Rng) -> ModelVector {
    DVector::from_fn(n, |_, _| sd * rng.sample::<f64, _>(StandardNormal))
}

/// Superposes all transmissions and returns ĝ = y/(√ρ·D).
///
/// `divisor` is `None` for the realized |𝒦_t|, or `Some(K_t)`.
pub fn aggregate(
    plan: &TransmitPlan,
    gains: &GainDraw,
    grads: &[Option<ModelVector>],
    awgn_var: f64,
    dim: usize,
    divisor: Option<f64>,
    seed: u64,
) -> Result<Aggregate> {
    let round = gains.round;
    let sr = plan.rho.sqrt();
    let parts: Vec<Option<ModelVector>> = par::map_range(plan.clients.len(), |k| {
        let c = &plan.clients[k];
        let noise = |var: f64| {
            let mut r = rng::stream(seed, round as u64, k as u64, Purpose::ArtificialNoise);
            gaussian(dim, var.sqrt(), &mut r)
        };
        match c.role {
            Role::Reliable => {
                let g = grads[k].as_ref().expect("plan checked reliable gradients");
                Some((g + noise(c.noise_var)) * sr)
            }
            Role::UnreliableNoisy => Some(noise(c.noise_var) * gains.gains[k].sqrt()),
            Role::UnreliableIdle => None,
        }
    });
    let participants = plan.participants();
    let denom = divisor.unwrap_or(participants.len() as f64);
    if !(denom >= 1.0) {
        return Err(Error::EmptyRound { t: round });
    }
    let mut y = gaussian(
        dim,
        (awgn_var / dim as f64).sqrt(),
        &mut rng::stream(seed, round as u64, SERVER, Purpose::Awgn),
    );
    for p in parts.into_iter().flatten() {
        y += p;
    }
    Ok(Aggregate {
        g_hat: y / (sr * denom),
        participants,
        sigma_q2: plan.noise_power(gains, dim) + awgn_var,
    })
}

/// Per-round ε charged to the IS baseline: plain Gaussian at P_i + σ_z².
pub fn is_baseline_round_eps(rho: f64, channel: &ChannelParams, cfg: &EngineConfig) -> Result<f64> {
    let noise = channel::expected_noise_power(Strategy::Idle, rho, channel, cfg.power, cfg.grad_bound)?
        + channel.awgn_var;
    rdp::gaussian_round_eps(&PrivacyParams::new(cfg.alpha as f64, cfg.grad_bound, noise, 1.0))
}

fn worst_participation(rho: f64, channel: &ChannelParams, cfg: &EngineConfig) -> Result<f64> {
    let mut best: f64 = 0.0;
    for s in &channel.sigma2 {
        best = best.max(channel::participation_probability(rho, cfg.power, cfg.grad_bound, *s)?);
    }
    Ok(best)
}

fn bound_eps(alpha: u32, w: f64, noise: f64, p: f64) -> Result<f64> {
    if noise <= 0.0 {
        return Ok(f64::INFINITY);
    }
    rdp::subsampled_round_eps_bound(&PrivacyParams::new(alpha as f64, w, noise, p))
}

/// ε charged per round when it does not depend on the draw.
fn fixed_round_eps(
    strategy: StrategySpec,
    rho: f64,
    channel: &ChannelParams,
    cfg: &EngineConfig,
) -> Result<Option<f64>> {
    let (p, w) = (cfg.power, cfg.grad_bound);
    let noise = |s| channel::expected_noise_power(s, rho, channel, p, w);
    let art = match strategy {
        StrategySpec::Noisy => noise(Strategy::Noisy)?,
        StrategySpec::Idle | StrategySpec::Baseline(Baseline::GammaBased) => noise(Strategy::Idle)?,
        StrategySpec::Mixed(q) => {
            let (n, i) = (noise(Strategy::Noisy)?, noise(Strategy::Idle)?);
            (1.0 - q) * i + q * n
        }
        StrategySpec::Baseline(Baseline::NoiseFree) => 0.0,
        StrategySpec::Baseline(Baseline::IsBased) => return is_baseline_round_eps(rho, channel, cfg).map(Some),
        StrategySpec::Baseline(Baseline::HMinBased) => return Ok(None),
    };
    let part = worst_participation(rho, channel, cfg)?;
    bound_eps(cfg.alpha, w, art + channel.awgn_var, part).map(Some)
}

pub struct TrainSpec {
    pub strategy: StrategySpec,
    /// Ignored by the h_min baseline, which sets ρ from each round's draw.
    pub rho: f64,
    pub tau: usize,
    pub seed: u64,
}

/// Runs τ rounds and returns one trace row per round.
pub fn run_training(
    task: &SyntheticTask,
    channel: &ChannelParams,
    learning: &LearningParams,
    cfg: &EngineConfig,
    spec: &TrainSpec,
) -> Result<TrainResult> {
    spec.strategy.validate()?;
    channel.validate()?;
    learning.validate()?;
    let k_all = channel.num_clients();
    if task.num_clients() != k_all {
        return Err(Error::param(
            "num_clients",
            format!("task has {} clients, channel has {k_all}", task.num_clients()),
        ));
    }
    let d = task.dim();
    let (p, w) = (cfg.power, cfg.grad_bound);
    let hmin = spec.strategy == StrategySpec::Baseline(Baseline::HMinBased);
    if !hmin {
        channel::threshold(spec.rho, p, w)?;
        if !(spec.rho > 0.0) {
            return Err(Error::param("rho", format!("must be positive, got {}", spec.rho)));
        }
    }
    let fixed_eps = if hmin { None } else { fixed_round_eps(spec.strategy, spec.rho, channel, cfg)? };
    let below = match spec.strategy {
        StrategySpec::Noisy => BelowThreshold::Noisy,
        StrategySpec::Mixed(q) => BelowThreshold::Mixed(q),
        _ => BelowThreshold::Idle,
    };
    let artificial_noise = spec.strategy != StrategySpec::Baseline(Baseline::NoiseFree);

    let mut theta: ModelVector = DVector::zeros(d);
    let mut weighted = DVector::zeros(d);
    let mut weight_total = 0.0;
    let mut ledger = RdpLedger::new();
    let mut trace = Vec::with_capacity(spec.tau);

    for t in 0..spec.tau {
        let gains = channel::sample_gains_keyed(channel, spec.seed, t);
        let rho = if hmin {
            let h = gains.min_gain();
            (p * h / (w * w)).min(channel::rho_cap(p, w))
        } else {
            spec.rho
        };
        let h_th = channel::threshold(rho, p, w)?;
        let eta = convergence::step_size(t, learning);
        let grads: Vec<Option<ModelVector>> = par::map_range(k_all, |k| {
            if !(hmin || gains.gains[k] >= h_th) {
                return None;
            }
            let mut r = rng::stream(spec.seed, t as u64, k as u64, Purpose::Minibatch);
            let (local, sum) = local_update(task, k, &theta, learning.local_steps, eta, &mut r);
            let raw = match cfg.update_form {
                UpdateForm::RescaledGradient => sum,
                UpdateForm::Displacement => local - &theta,
            };
            Some(if cfg.normalize_to_w { normalize_to(&raw, w) } else { clip_gradient(&raw, w) })
        });
        let settings = PlanSettings { rho, power: p, grad_bound: w, dim: d, below, artificial_noise, all_reliable: hmin };
        let plan = build_transmit_plan(&settings, &gains, &grads, spec.seed)?;
        let divisor = match (cfg.divisor, hmin) {
            (DivisorMode::Realized, _) => None,
            (DivisorMode::Expected, true) => Some(k_all as f64),
            (DivisorMode::Expected, false) => Some(channel::expected_participants(rho, channel, p, w)?),
        };

        let beta = (learning.schedule_offset + t as f64).powi(2);
        weighted += &theta * beta;
        weight_total += beta;

        let (participants, sigma_q2) = match aggregate(&plan, &gains, &grads, channel.awgn_var, d, divisor, spec.seed) {
            Ok(agg) => {
                match cfg.update_form {
                    UpdateForm::RescaledGradient => theta -= agg.g_hat * eta,
                    UpdateForm::Displacement => theta += agg.g_hat,
                }
                (agg.participants, agg.sigma_q2)
            }
            Err(Error::EmptyRound { t }) => {
                debug!("round {t}: no reliable clients, model unchanged");
                (Vec::new(), plan.noise_power(&gains, d) + channel.awgn_var)
            }
            Err(e) => return Err(e),
        };
        let round_eps = match fixed_eps {
            Some(e) => e,
            None => bound_eps(cfg.alpha, w, sigma_q2, 1.0)?,
        };
        ledger = rdp::compose(ledger, round_eps)?;
        let avg = &weighted / weight_total;
        trace.push(RoundTrace {
            t,
            participants,
            sigma_q2_realized: sigma_q2,
            loss_current: task.suboptimality(&theta),
            loss_weighted: task.suboptimality(&avg),
            eps_cumulative: ledger.total_eps,
        });
    }
    let weighted_theta = if weight_total > 0.0 { weighted / weight_total } else { theta.clone() };
    Ok(TrainResult { trace, theta, weighted_theta, ledger })
}
