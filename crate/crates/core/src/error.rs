//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Solver state left the finite range.
    #[error("environment blowup at solver substep {substep}: non-finite state")]
    Blowup { substep: usize },

    /// Runtime stability bound violated before the state went non-finite.
    #[error("environment unstable at solver substep {substep}: advective CFL {cfl:.3} > 1")]
    Unstable { substep: usize, cfl: f64 },

    /// Dataset generation gave up on a trajectory after repeated blowups.
    #[error("trajectory {index} still blowing up after {attempts} resampling attempts")]
    ResampleExhausted { index: usize, attempts: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed or mismatched file content.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
