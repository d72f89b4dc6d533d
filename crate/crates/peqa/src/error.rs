//! Error type shared across the crate.

use std::fmt;
use std::io;

/// Unified error for quantization, packing, kernels, training, and artifact I/O.
#[derive(Debug)]
pub enum Error {
    /// A configuration value is outside its allowed domain (bad bit-width,
    /// group size not dividing the input dimension, invalid hyperparameter).
    Config(String),
    /// Input data violates a precondition (non-finite values, shape mismatch,
    /// token id out of vocabulary range).
    Input(String),
    /// A scale of exactly zero was encountered where the degenerate-group rule
    /// does not apply; carries the offending output channel.
    ZeroScale { channel: usize },
    /// Stored or in-flight data failed an integrity check (out-of-range code,
    /// checksum mismatch, truncated section, wrong magic, fingerprint mismatch).
    Integrity(String),
    /// Training produced a non-finite loss or gradient at the given step.
    Diverged { step: usize },
    /// Underlying I/O failure.
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Input(msg) => write!(f, "invalid input: {msg}"),
            Error::ZeroScale { channel } => {
                write!(f, "zero scale outside the degenerate rule at output channel {channel}")
            }
            Error::Integrity(msg) => write!(f, "integrity error: {msg}"),
            Error::Diverged { step } => {
                write!(f, "training diverged (non-finite loss or gradient) at step {step}")
            }
            Error::Io(err) => write!(f, "i/o error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(err: io::Error) -> Self {
        Error::Io(err)
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
