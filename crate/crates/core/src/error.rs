use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library.
///
/// `Contract` marks a violated precondition (bad shape, empty bank, invalid
/// config); the CLI maps it to exit code 2. `CheckFailed` marks a numerical
/// verification that ran but did not pass (exit code 3).
#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("non-finite loss {loss} at step {step} (clip seed {clip_seed})")]
    NonFiniteLoss { loss: f64, step: usize, clip_seed: u64 },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Returns a contract violation unless the condition holds.
macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)*)));
        }
    };
}

pub(crate) use ensure;
