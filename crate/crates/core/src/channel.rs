//! Rayleigh block fading and the closed-form participation / noise statistics
//! built on it.
//!
//! Gains are exponential with mean 2σ_k², so Pr(h > x) = exp(-x / (2σ_k²)).

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// What a client below the threshold does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Noisy,
    Idle,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Noisy => "noisy",
            Strategy::Idle => "idle",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelParams {
    pub sigma2: Vec<f64>,
    pub awgn_var: f64,
}

impl ChannelParams {
    pub fn new(sigma2: Vec<f64>, awgn_var: f64) -> Result<Self> {
        let p = ChannelParams { sigma2, awgn_var };
        p.validate()?;
        Ok(p)
    }

    pub fn homogeneous(k: usize, sigma2: f64, awgn_var: f64) -> Result<Self> {
        Self::new(vec![sigma2; k], awgn_var)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma2.is_empty() {
            return Err(Error::param("num_clients", "need at least one client"));
        }
        if let Some(s) = self.sigma2.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::param("sigma2", format!("must be positive, got {s}")));
        }
        if !(self.awgn_var >= 0.0 && self.awgn_var.is_finite()) {
            return Err(Error::param("awgn_var", format!("must be >= 0, got {}", self.awgn_var)));
        }
        Ok(())
    }

    pub fn num_clients(&self) -> usize {
        self.sigma2.len()
    }

    /// Common σ² when every client shares it.
    pub fn homogeneous_sigma2(&self) -> Option<f64> {
        let s0 = self.sigma2[0];
        self.sigma2.iter().all(|s| *s == s0).then_some(s0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainDraw {
    pub gains: Vec<f64>,
    pub phases: Vec<f64>,
    pub round: usize,
}

impl GainDraw {
    pub fn min_gain(&self) -> f64 {
        self.gains.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn draw_one<R: Rng + ?Sized>(sigma2: f64, rng: &mut R) -> (f64, f64) {
    let exp = Exp::new(1.0 / (2.0 * sigma2)).expect("sigma2 validated positive");
    let h = exp.sample(rng);
    let phi = rng.random::<f64>() * TAU;
    (h, phi)
}

/// Draws all K gains from a single stream.
pub fn sample_gains<R: Rng + ?Sized>(params: &ChannelParams, rng: &mut R, round: usize) -> GainDraw {
    let (gains, phases) = params.sigma2.iter().map(|s| draw_one(*s, rng)).unzip();
    GainDraw { gains, phases, round }
}

/// Draws client k's gain from its own (seed, round, k) stream, so the draw
/// of one client does not depend on how many others exist.
pub fn sample_gains_keyed(params: &ChannelParams, master: u64, round: usize) -> GainDraw {
    let (gains, phases) = params
        .sigma2
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let mut r = rng::stream(master, round as u64, k as u64, Purpose::Channel);
            draw_one(*s, &mut r)
        })
        .unzip();
    GainDraw { gains, phases, round }
}

fn check_pw(p: f64, w: f64) -> Result<()> {
    if !(p > 0.0) {
        return Err(Error::param("power", format!("must be positive, got {p}")));
    }
    if !(w > 0.0) {
        return Err(Error::param("grad_bound", format!("must be positive, got {w}")));
    }
    Ok(())
}

/// Largest admissible ρ, P/W².
pub fn rho_cap(p: f64, w: f64) -> f64 {
    p / (w * w)
}

pub fn threshold(rho: f64, p: f64, w: f64) -> Result<f64> {
    check_pw(p, w)?;
    if !(rho >= 0.0) {
        return Err(Error::param("rho", format!("must be >= 0, got {rho}")));
    }
    Ok(rho * w * w / p)
}

fn check_rho(rho: f64, p: f64, w: f64) -> Result<()> {
    check_pw(p, w)?;
    let cap = rho_cap(p, w);
    // tolerate rounding at the cap
    if !(rho >= 0.0 && rho <= cap * (1.0 + 1e-12)) {
        return Err(Error::param("rho", format!("must lie in [0, {cap}], got {rho}")));
    }
    Ok(())
}

pub fn participation_probability(rho: f64, p: f64, w: f64, sigma2_k: f64) -> Result<f64> {
    check_rho(rho, p, w)?;
    if !(sigma2_k > 0.0) {
        return Err(Error::param("sigma2", format!("must be positive, got {sigma2_k}")));
    }
    Ok((-rho * w * w / (2.0 * p * sigma2_k)).exp())
}

/// K_t(ρ) = Σ_k exp(-ρW²/(2Pσ_k²)).
pub fn expected_participants(rho: f64, params: &ChannelParams, p: f64, w: f64) -> Result<f64> {
    check_rho(rho, p, w)?;
    Ok(params
        .sigma2
        .iter()
        .map(|s| (-rho * w * w / (2.0 * p * s)).exp())
        .sum())
}

/// Channel-averaged artificial-noise power, AWGN excluded.
///
/// noisy: Σ_k [2Pσ_k² − ρW²·p_k]; idle: Σ_k 2Pσ_k²·p_k.
pub fn expected_noise_power(
    strategy: Strategy,
    rho: f64,
    params: &ChannelParams,
    p: f64,
    w: f64,
) -> Result<f64> {
    check_rho(rho, p, w)?;
    let w2 = w * w;
    Ok(params
        .sigma2
        .iter()
        .map(|s| {
            let pk = (-rho * w2 / (2.0 * p * s)).exp();
            match strategy {
                Strategy::Noisy => 2.0 * p * s - rho * w2 * pk,
                Strategy::Idle => 2.0 * p * s * pk,
            }
        })
        .sum())
}
