//! Convergence-error bound for FedAvg over the noisy MAC, and the 1/τ
//! approximation the optimizer works with.

use serde::{Deserialize, Serialize};

use crate::channel::{self, ChannelParams, Strategy};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningParams {
    pub smoothness: f64,
    pub mu: f64,
    pub grad_sq_bound: f64,
    pub schedule_offset: f64,
    pub local_steps: usize,
    pub grad_bound: f64,
    pub model_dim: usize,
    /// 𝔼‖θ₀ − θ*‖².
    pub init_gap: f64,
}

impl LearningParams {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("smoothness", self.smoothness),
            ("mu", self.mu),
            ("grad_sq_bound", self.grad_sq_bound),
            ("schedule_offset", self.schedule_offset),
            ("grad_bound", self.grad_bound),
        ];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("must be positive, got {v}")));
            }
        }
        if self.local_steps == 0 {
            return Err(Error::param("local_steps", "must be >= 1"));
        }
        if self.model_dim == 0 {
            return Err(Error::param("model_dim", "must be >= 1"));
        }
        if !(self.init_gap >= 0.0) {
            return Err(Error::param("init_gap", format!("must be >= 0, got {}", self.init_gap)));
        }
        if self.mu > self.smoothness {
            return Err(Error::param(
                "mu",
                format!("strong convexity {} exceeds smoothness {}", self.mu, self.smoothness),
            ));
        }
        let need = (2f64.sqrt() + 1.0) * self.smoothness;
        if self.schedule_offset <= need {
            return Err(Error::param(
                "schedule_offset",
                format!("must exceed (sqrt2+1)M = {need}, got {}", self.schedule_offset),
            ));
        }
        Ok(())
    }
}

/// Expected participants and effective noise at a given ρ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelContext {
    pub kt: f64,
    pub sigma_q2: f64,
}

impl ChannelContext {
    /// Expected K_t and σ_q² under `strategy`. With `include_awgn` the
    /// channel noise σ_z² is added (training mode); the optimizer leaves it out.
    pub fn expected(
        strategy: Strategy,
        rho: f64,
        params: &ChannelParams,
        p: f64,
        w: f64,
        include_awgn: bool,
    ) -> Result<Self> {
        let kt = channel::expected_participants(rho, params, p, w)?;
        let mut sigma_q2 = channel::expected_noise_power(strategy, rho, params, p, w)?;
        if include_awgn {
            sigma_q2 += params.awgn_var;
        }
        Ok(ChannelContext { kt, sigma_q2 })
    }
}

/// a = max(⌈(√2+1)M⌉ + 1, ⌈8LM/μ⌉), which keeps η₀ = 4/(μa) ≤ 1/(2LM).
pub fn default_schedule_offset(smoothness: f64, mu: f64, local_steps: usize) -> f64 {
    let base = ((2f64.sqrt() + 1.0) * smoothness).ceil() + 1.0;
    let step = (8.0 * local_steps as f64 * smoothness / mu).ceil();
    base.max(step)
}

pub fn step_size(t: usize, lp: &LearningParams) -> f64 {
    4.0 / (lp.mu * (lp.schedule_offset + t as f64))
}

/// S_τ = Σ_{t<τ} (a+t)².
pub fn weight_sum(tau: usize, lp: &LearningParams) -> f64 {
    let a = lp.schedule_offset;
    let s: f64 = (0..tau).map(|t| (a + t as f64).powi(2)).sum();
    debug_assert!(s >= (tau as f64).powi(3) / 3.0 * (1.0 - 1e-12));
    s
}

fn check_args(tau: usize, rho: f64, ctx: &ChannelContext) -> Result<()> {
    if tau == 0 {
        return Err(Error::param("tau", "must be >= 1"));
    }
    if !(rho > 0.0) {
        return Err(Error::param("rho", format!("must be positive, got {rho}")));
    }
    if !(ctx.kt >= 1.0) {
        return Err(Error::DegenerateParticipation { kt: ctx.kt });
    }
    if !(ctx.sigma_q2 >= 0.0) {
        return Err(Error::param("sigma_q2", format!("must be >= 0, got {}", ctx.sigma_q2)));
    }
    Ok(())
}

fn bracket(rho: f64, lp: &LearningParams, ctx: &ChannelContext) -> f64 {
    let m = lp.smoothness;
    4.0 * m * m * lp.grad_sq_bound / ctx.kt + ctx.sigma_q2 / (ctx.kt * ctx.kt * rho)
}

/// γ = μa³/(4S_τ)·init_gap + 2τ(τ+a)/(μS_τ)·(4M²G/K_t + σ_q²/(K_t²ρ)).
pub fn theorem2_bound(tau: usize, rho: f64, lp: &LearningParams, ctx: &ChannelContext) -> Result<f64> {
    check_args(tau, rho, ctx)?;
    let a = lp.schedule_offset;
    let s = weight_sum(tau, lp);
    let t = tau as f64;
    let first = lp.mu * a.powi(3) / (4.0 * s) * lp.init_gap;
    let second = 2.0 * t * (t + a) / (lp.mu * s) * bracket(rho, lp, ctx);
    Ok(first + second)
}

/// (6/τ)·(4M²G/K_t + σ_q²/(K_t²ρ)).
pub fn gamma_approx(tau: usize, rho: f64, lp: &LearningParams, ctx: &ChannelContext) -> Result<f64> {
    check_args(tau, rho, ctx)?;
    Ok(6.0 / tau as f64 * bracket(rho, lp, ctx))
}
