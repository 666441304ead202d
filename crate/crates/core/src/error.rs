use thiserror::Error;

/// Errors raised by the training engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// A non-finite value appeared while propagating through residual block `block`.
    /// `block == K` denotes the classifier head.
    #[error("forward propagation diverged at block {block}")]
    Diverged { block: usize },

    #[error("level mismatch: cannot transfer from level {from} to level {to}")]
    LevelMismatch { from: usize, to: usize },

    #[error("first-order coherence violated on level {level}: relative error {error:e}")]
    Coherence { level: usize, error: f64 },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
