use std::path::PathBuf;

/// Exit status for success.
pub const EXIT_OK: i32 = 0;
/// Bad command line, configuration or input file.
pub const EXIT_USAGE: i32 = 2;
/// Numerical or physics failure (integration, detection, unwrapping, fitting).
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("cannot read {path}: {source}")]
    Input {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("invalid config {path}: {message}")]
    Config { path: PathBuf, message: String },

    /// Core error raised inside `stage` (simulate, retrieve/fourier, fit, ...).
    #[error("{stage}: {source}")]
    Core {
        stage: &'static str,
        source: kerrvapor_core::Error,
    },

    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Input { .. } | CliError::Config { .. } => EXIT_USAGE,
            CliError::Core { source, .. } if source.is_usage() => EXIT_USAGE,
            CliError::Output { .. } | CliError::Core { .. } | CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Attaches the pipeline stage to a core error.
pub trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> Stage<T> for kerrvapor_core::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|source| CliError::Core { stage, source })
    }
}
