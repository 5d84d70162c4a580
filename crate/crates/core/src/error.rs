use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{what} out of range: {detail}")]
    Range { what: String, detail: String },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension { what: String, expected: usize, got: usize },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("history underflow: {0}")]
    HistoryUnderflow(String),

    #[error("control value at node {node} is not in the control set")]
    ControlMembership { node: isize },

    #[error("simulation diverged at node {node} of path {path}")]
    Diverged { path: usize, node: usize },

    #[error("bundle identity violated: {0}")]
    BundleIdentity(String),

    #[error("mode error: {0}")]
    Mode(String),

    #[error("basis error: {0}")]
    Basis(String),
}

impl Error {
    pub(crate) fn range(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Range {
            what: what.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn dim(what: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what: what.into(),
            expected,
            got,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
