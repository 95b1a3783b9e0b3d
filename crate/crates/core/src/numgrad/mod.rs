//! Minimal reverse-mode automatic differentiation over row-major `f64`
//! matrices.
//!
//! A [`tape::Tape`] records every forward operation as a node; calling
//! [`tape::Tape::backward`] on a scalar output walks the nodes in reverse
//! and accumulates gradients for the leaves. There is no graph pruning, no
//! broadcasting beyond what the ops define, and no dtype besides `f64` —
//! the goal is auditability, not speed. The heavy inner loops live in
//! [`kernels`] with a rayon path and a sequential path that produce
//! bit-identical results.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod tape;
pub mod tensor;

use thiserror::Error;

/// Errors surfaced by tensor construction, tape operations, and the
/// optimizer. Shape mismatches name the operation so a failed build of a
/// large loss graph is traceable.
#[derive(Debug, Error)]
pub enum NumError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("logarithm of non-positive value {value:e}")]
    LogNonPositive { value: f64 },
    #[error("backward requires a scalar output, got {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },
    #[error("row index {index} out of range for {rows} rows")]
    RowOutOfRange { index: usize, rows: usize },
    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },
    #[error("invalid argument: {0}")]
    Invalid(String),
}
