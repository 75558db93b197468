use thiserror::Error;

/// Errors produced anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed malformed input (length mismatch, token out of range, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A gradient coefficient or ratio became NaN or infinite.
    #[error("numeric error in group {group}, rollout {rollout}, position {position}: {what}")]
    Numeric {
        what: String,
        group: usize,
        rollout: usize,
        position: usize,
    },

    /// Exhaustive enumeration would exceed the leaf budget.
    #[error("capacity error: enumeration needs up to {needed} leaves, limit is {limit}")]
    Capacity { needed: f64, limit: usize },

    #[error("config error: {0}")]
    Config(String),

    /// Training aborted at a specific global step.
    #[error("training aborted at global step {step}, update {update}: {source}")]
    Training {
        step: usize,
        update: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
