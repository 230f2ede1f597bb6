//! Meta-learning with trajectory PCA.
//!
//! The library trains meta-initializations with Reptile and with
//! Eigen-Reptile, whose meta-update follows the principal direction of the
//! inner-loop parameter trajectory (recovered cheaply from the n x n Gram
//! matrix of snapshots instead of the d x d scatter matrix). ISPL adds
//! prior-model loss voting to discard likely-corrupted samples before each
//! inner loop. The `verify` module checks the supporting linear algebra
//! numerically, and `cli` wires everything into the `eigen-reptile`
//! binary.

pub mod cli;
pub mod config;
pub mod error;
pub mod ispl;
pub mod linalg;
pub mod matrix;
pub mod meta;
pub mod nn;
pub mod seeds;
pub mod tasks;
pub mod trajectory;
pub mod verify;

pub use error::{Error, Result};
