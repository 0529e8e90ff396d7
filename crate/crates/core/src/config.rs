//! JSON run configuration, environment overrides and resolution into the
//! parameter structs the library works with.
//!
//! Every key has a default, so an empty file is a valid configuration.
//! Unknown keys are rejected. `CDPB_<KEY>` environment variables override
//! top-level keys; `CDPB_TASK_<KEY>` overrides keys of the `task` object.

use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::channel::ChannelParams;
use crate::convergence::{self, LearningParams};
use crate::engine::{DivisorMode, EngineConfig, UpdateForm};
use crate::error::{Error, Result};
use crate::optimizer::OptimizerConfig;
use crate::task::{SyntheticTask, TaskSpec};

pub const SCHEMA_VERSION: u32 = 1;
pub const ENV_PREFIX: &str = "CDPB_";

/// One σ² for every client, or one per client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sigma2 {
    Common(f64),
    PerClient(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub schema_version: u32,
    pub num_clients: usize,
    pub power: f64,
    pub grad_bound: f64,
    pub sigma2: Sigma2,
    pub awgn_var: f64,
    pub alpha: u32,
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma_bar: f64,
    pub eps_bar: f64,
    pub local_steps: usize,
    /// Overrides for the task-derived constants M, μ, G and a.
    pub smoothness: Option<f64>,
    pub mu: Option<f64>,
    pub grad_sq_bound: Option<f64>,
    pub schedule_offset: Option<f64>,
    /// G = headroom × pilot maximum.
    pub g_headroom: f64,
    pub pilot_rounds: usize,
    pub psi: f64,
    pub max_iters: usize,
    pub divisor_mode: DivisorMode,
    pub update_form: UpdateForm,
    pub normalize_to_w: bool,
    /// Use the closed-form ρ rules. Needs a common σ².
    pub closed_form: bool,
    pub strategy: String,
    pub seed: u64,
    pub num_seeds: usize,
    pub task: TaskSpec,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            schema_version: SCHEMA_VERSION,
            num_clients: 100,
            power: 1.0,
            grad_bound: 0.6,
            sigma2: Sigma2::Common(0.5),
            awgn_var: 0.01,
            alpha: 4,
            lambda1: 1.0,
            lambda2: 1e-5,
            gamma_bar: 1e-2,
            eps_bar: 100.0,
            local_steps: 1,
            smoothness: None,
            mu: None,
            grad_sq_bound: None,
            schedule_offset: None,
            g_headroom: 1.2,
            pilot_rounds: 200,
            psi: 1e-10,
            max_iters: 200,
            divisor_mode: DivisorMode::Realized,
            update_form: UpdateForm::RescaledGradient,
            normalize_to_w: false,
            closed_form: true,
            strategy: "idle".into(),
            seed: 0,
            num_seeds: 20,
            task: TaskSpec::default(),
        }
    }
}

fn positive(field: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::param(field, format!("must be positive and finite, got {v}")))
    }
}

impl SystemConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let text = if text.trim().is_empty() { "{}" } else { text };
        let cfg: SystemConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads, applies `CDPB_*` overrides from the process environment and
    /// validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let cfg = Self::from_json(&text)?.with_overrides(std::env::vars())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `CDPB_KEY=value` pairs. Values are parsed as JSON and fall
    /// back to a plain string.
    pub fn with_overrides<I>(self, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut doc = serde_json::to_value(&self).map_err(|e| Error::Config(e.to_string()))?;
        let mut touched = false;
        for (k, v) in vars {
            let Some(key) = k.strip_prefix(ENV_PREFIX) else { continue };
            let key = key.to_ascii_lowercase();
            let val: Value = serde_json::from_str(&v).unwrap_or(Value::String(v.clone()));
            let obj = doc.as_object_mut().expect("config serializes to an object");
            if obj.contains_key(&key) {
                obj.insert(key, val);
            } else if let Some(sub) = key.strip_prefix("task_") {
                let task = obj.get_mut("task").and_then(Value::as_object_mut).expect("task is an object");
                if !task.contains_key(sub) {
                    return Err(Error::Config(format!("unknown override {k}")));
                }
                task.insert(sub.to_string(), val);
            } else {
                return Err(Error::Config(format!("unknown override {k}")));
            }
            touched = true;
        }
        if !touched {
            return Ok(self);
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(format!("bad override: {e}")))
    }

    pub fn sigma2_vec(&self) -> Vec<f64> {
        match &self.sigma2 {
            Sigma2::Common(s) => vec![*s; self.num_clients],
            Sigma2::PerClient(v) => v.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::param(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", self.schema_version),
            ));
        }
        if self.num_clients == 0 {
            return Err(Error::param("num_clients", "must be >= 1"));
        }
        for (f, v) in [
            ("power", self.power),
            ("grad_bound", self.grad_bound),
            ("gamma_bar", self.gamma_bar),
            ("eps_bar", self.eps_bar),
            ("g_headroom", self.g_headroom),
            ("psi", self.psi),
        ] {
            positive(f, v)?;
        }
        for (f, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(f, format!("must be >= 0, got {v}")));
            }
        }
        if !(self.awgn_var >= 0.0 && self.awgn_var.is_finite()) {
            return Err(Error::param("awgn_var", format!("must be >= 0, got {}", self.awgn_var)));
        }
        if self.alpha < 2 {
            return Err(Error::param("alpha", format!("must be an integer >= 2, got {}", self.alpha)));
        }
        if self.local_steps == 0 {
            return Err(Error::param("local_steps", "must be >= 1"));
        }
        if self.max_iters == 0 {
            return Err(Error::param("max_iters", "must be >= 1"));
        }
        if self.num_seeds == 0 {
            return Err(Error::param("num_seeds", "must be >= 1"));
        }
        for (f, v) in [
            ("smoothness", self.smoothness),
            ("mu", self.mu),
            ("grad_sq_bound", self.grad_sq_bound),
            ("schedule_offset", self.schedule_offset),
        ] {
            if let Some(v) = v {
                positive(f, v)?;
            }
        }
        let s2 = self.sigma2_vec();
        if s2.len() != self.num_clients {
            return Err(Error::param(
                "sigma2",
                format!("has {} entries for {} clients", s2.len(), self.num_clients),
            ));
        }
        if let Some(s) = s2.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::param("sigma2", format!("must be positive, got {s}")));
        }
        if self.closed_form && s2.iter().any(|s| *s != s2[0]) {
            return Err(Error::param(
                "sigma2",
                "closed forms rely on channel homogeneity (one common sigma2); set closed_form=false",
            ));
        }
        self.strategy.parse::<crate::engine::StrategySpec>()?;
        self.task.validate()?;
        Ok(())
    }

    /// Builds the task, certifies G and assembles every parameter struct.
    pub fn resolve(&self) -> Result<Resolved> {
        self.validate()?;
        let task = SyntheticTask::build(&self.task, self.num_clients)?;
        let channel = ChannelParams::new(self.sigma2_vec(), self.awgn_var)?;
        let smoothness = self.smoothness.unwrap_or(task.smoothness);
        let mu = self.mu.unwrap_or(task.mu);
        let offset = self
            .schedule_offset
            .unwrap_or_else(|| convergence::default_schedule_offset(smoothness, mu, self.local_steps));
        let g = match self.grad_sq_bound {
            Some(g) => g,
            None => task.certify_grad_bound(self.pilot_rounds, self.local_steps, offset, self.g_headroom),
        };
        info!("task: M={smoothness}, mu={mu}, G={g}, a={offset}");
        let learning = LearningParams {
            smoothness,
            mu,
            grad_sq_bound: g,
            schedule_offset: offset,
            local_steps: self.local_steps,
            grad_bound: self.grad_bound,
            model_dim: task.dim(),
            init_gap: task.theta_star.norm_squared(),
        };
        learning.validate()?;
        let optimizer = OptimizerConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            gamma_bar: self.gamma_bar,
            eps_bar: self.eps_bar,
            power: self.power,
            grad_bound: self.grad_bound,
            alpha: self.alpha,
            channel: channel.clone(),
            learning,
            psi: self.psi,
            max_iters: self.max_iters,
            closed_form: self.closed_form,
        };
        optimizer.validate()?;
        let engine = EngineConfig {
            power: self.power,
            grad_bound: self.grad_bound,
            alpha: self.alpha,
            divisor: self.divisor_mode,
            update_form: self.update_form,
            normalize_to_w: self.normalize_to_w,
        };
        Ok(Resolved { config: self.clone(), task, channel, learning, optimizer, engine })
    }
}

#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: SystemConfig,
    pub task: SyntheticTask,
    pub channel: ChannelParams,
    pub learning: LearningParams,
    pub optimizer: OptimizerConfig,
    pub engine: EngineConfig,
}
