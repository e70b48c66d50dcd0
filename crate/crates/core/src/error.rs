use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("declaration error: {0}")]
    Declaration(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("lineage error: {a} and {b} do not share one ancestor chain")]
    Lineage { a: String, b: String },
    #[error("shape error in {op}: {lhs} vs {rhs}")]
    Shape { op: &'static str, lhs: String, rhs: String },
    #[error("range error: {0}")]
    Range(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("unsupported operation for differentiation: {0}")]
    Unsupported(String),
    #[error("projection rewrite rejected: {0}")]
    Rejected(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("stale dynamic structure: {0}")]
    Stale(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    /// True for errors caused by floating point trouble rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn decl<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Declaration(msg.into()))
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Validation(msg.into()))
}
