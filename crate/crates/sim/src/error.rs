use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] relsym::Error),
    #[error("frame {frame}, Newton iteration {iteration}: line search failed after {halvings} halvings (energy {energy:e}, last trial {trial:e})")]
    LineSearch { frame: usize, iteration: usize, halvings: usize, energy: f64, trial: f64 },
    #[error("frame {frame}: non-finite {what}")]
    NonFinite { frame: usize, what: String },
    #[error("finite-difference check failed: {0}")]
    FdCheck(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl SimError {
    /// Process exit code: 2 for bad input, 3 for numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            SimError::Config(_) => 2,
            SimError::Core(e) if e.is_numerical() => 3,
            SimError::Core(_) => 2,
            SimError::LineSearch { .. } | SimError::NonFinite { .. } | SimError::FdCheck(_) => 3,
            SimError::Io { .. } => 1,
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> SimError {
        SimError::Io { path: path.display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, SimError>;
