use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParam { field: &'static str, reason: String },

    #[error("infeasible iteration set: tau_min={tau_min} > tau_max={tau_max}")]
    Infeasible { tau_min: i64, tau_max: i64 },

    #[error("nonpositive radicand {value} in closed-form rho")]
    NonPositiveRadicand { value: f64 },

    #[error("bisection exceeded max iterations, last bracket [{lo}, {hi}]")]
    MaxItersExceeded { lo: f64, hi: f64 },

    #[error("no convergence: {0}")]
    NonConvergence(String),

    #[error("round {t}: no participating clients")]
    EmptyRound { t: usize },

    #[error("degenerate participation: K_t = {kt} < 1")]
    DegenerateParticipation { kt: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error("i/o error at {path}: {msg}")]
    Io { path: String, msg: String },
}

impl Error {
    pub(crate) fn param(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParam {
            field,
            reason: reason.into(),
        }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParam { .. } | Error::Infeasible { .. } | Error::Config(_) => 2,
            Error::DegenerateParticipation { .. } => 2,
            Error::NonPositiveRadicand { .. }
            | Error::MaxItersExceeded { .. }
            | Error::NonConvergence(_)
            | Error::EmptyRound { .. } => 3,
            Error::Io { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
