use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or dimensions do not line up.
    #[error("structural error: {0}")]
    Structural(String),

    /// An argument is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A quantity that must be nonzero (a norm, a batch) is degenerate.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("capacity exceeded: {what} is {size}, cap is {cap}")]
    Capacity { what: &'static str, size: usize, cap: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The input violates a precondition an identity depends on.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("learning rate {lr} times decay {beta} is {product}, must be below 1")]
    Instability { lr: f64, beta: f64, product: f64 },

    #[error("format error in {path} at byte {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }
}
