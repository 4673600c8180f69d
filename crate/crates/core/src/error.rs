use thiserror::Error;

/// Errors produced by the simulation and retrieval pipelines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{name} = {value} is outside its valid domain ({reason})")]
    Domain {
        name: &'static str,
        value: f64,
        reason: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular linear system: {0}")]
    Singular(String),

    /// Step size underflow or non-finite state. `last_state` is the last accepted
    /// state, flattened as (re, im) pairs.
    #[error("integration failed at t = {t:e} s: {reason}")]
    Integration {
        t: f64,
        reason: String,
        last_state: Vec<(f64, f64)>,
    },

    #[error("system has a non-decaying mode (max Re(eigenvalue) = {max_re:e})")]
    NonDecaying { max_re: f64 },

    #[error("fit did not converge: {reason} (residual rms {residual_rms:e})")]
    FitNonConvergence { reason: String, residual_rms: f64 },

    #[error("satellite peak detection failed: {0}")]
    Detection(String),

    #[error("phase unwrapping aborted: residue density {density:.2e} above limit {limit:.2e}")]
    UnwrapQuality { density: f64, limit: f64 },

    #[error("too many failed trajectories: {failed} of {total}")]
    TrajectoryFailures { failed: usize, total: usize },

    #[error("constants file line {line}: {message}")]
    Constants { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors caused by bad inputs rather than numerical breakdown.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Domain { .. } | Error::InvalidArgument(_) | Error::Constants { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
