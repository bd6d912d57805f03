use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the calibration library.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: architecture, hyperparameters, grid specs.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid input data (empty batches, non-finite inputs, length mismatch).
    #[error("input error: {0}")]
    Input(String),

    /// Model parameter outside its admissible range.
    #[error("domain error: {0}")]
    Domain(String),

    /// A derivative or loss became non-finite at a specific location.
    #[error("numerical error at ({moneyness}, {tau}): {what}")]
    Numerical { moneyness: f64, tau: f64, what: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: e_mse={e_mse}, e_penalty={e_penalty}")]
    Diverged { epoch: usize, e_mse: f64, e_penalty: f64 },

    /// Shapes of tapes, adjoints or optimizer state disagree.
    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("parse error in {path} at line {line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
