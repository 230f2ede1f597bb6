//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Shapes of two operands disagree.
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    /// A batch with zero samples was passed where at least one is required.
    EmptyBatch,
    /// A non-finite value showed up where the math requires finite input.
    NonFinite(&'static str),
    /// Network or episode description violates its own invariants.
    InvalidSpec(String),
    /// Matrix handed to the symmetric eigensolver is not symmetric.
    NotSymmetric { max_asymmetry: f64 },
    /// Jacobi sweeps exhausted without reaching the off-diagonal target.
    NoConvergence { sweeps: usize, off_norm: f64 },
    /// Trajectory has no usable variance; no principal direction exists.
    DegenerateTrajectory,
    /// A selection mask with zero active samples reached the inner loop.
    EmptySelection,
    /// Run configuration failed validation.
    Config(String),
    /// Malformed row in an episode file.
    ParseEpisode { path: String, line: usize, message: String },
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch { what, expected, got } => {
                write!(f, "dimension mismatch in {what}: expected {expected}, got {got}")
            }
            Error::EmptyBatch => write!(f, "batch contains no samples"),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::InvalidSpec(msg) => write!(f, "invalid specification: {msg}"),
            Error::NotSymmetric { max_asymmetry } => {
                write!(f, "matrix is not symmetric (max |a_ij - a_ji| = {max_asymmetry:.3e})")
            }
            Error::NoConvergence { sweeps, off_norm } => {
                write!(f, "eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {off_norm:.3e})")
            }
            Error::DegenerateTrajectory => write!(f, "trajectory is degenerate: no principal direction"),
            Error::EmptySelection => write!(f, "selection mask keeps zero samples"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::ParseEpisode { path, line, message } => {
                write!(f, "{path}:{line}: {message}")
            }
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
