//! Dense 2-D tensors over f64 with reverse-mode differentiation.
//!
//! Forward operations record themselves onto an implicit tape whenever an
//! input requires gradients; [`Tensor::backward`] replays the tape in
//! reverse topological order and accumulates gradients into the leaves.
//! Graphs are single-use: backward consumes the recorded operations, and a
//! second backward through the same graph is an error.
//!
//! Tensors produced from inputs that do not require gradients (a frozen
//! teacher, cached targets) record nothing and cost nothing at backward
//! time.

mod check;
mod graph;
mod ops;
mod tensor;


pub use check::{grad_check, grad_check_params};
pub use ops::{cross_entropy_rows, hconcat, kl_div_rows, kl_div_rows_masked, mse, mse_masked, supcon_from_scores, vconcat};
pub use tensor::Tensor;

/// Errors surfaced by tensor construction, forward ops and backward.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: left is {a_rows}x{a_cols}, right is {b_rows}x{b_cols}")]
    ShapeMismatch {
        op: &'static str,
        a_rows: usize,
        a_cols: usize,
        b_rows: usize,
        b_cols: usize,
    },
    #[error("invalid dimensions in {op}: {msg}")]
    Dimension { op: &'static str, msg: String },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    DataLength { len: usize, rows: usize, cols: usize },
    #[error("row {row} of {side} sums to {sum}, not a probability vector")]
    NotProbabilityRow {
        side: &'static str,
        row: usize,
        sum: f64,
    },
    #[error("row {row} in {op} has near-zero norm and cannot be normalized")]
    DegenerateRow { op: &'static str, row: usize },
    #[error("backward requires a 1x1 scalar, got {rows}x{cols}")]
    BackwardNonScalar { rows: usize, cols: usize },
    #[error("backward called twice on the same graph; graphs are single-use")]
    BackwardTwice,
    #[error("backward called on a tensor with no recorded graph")]
    NoGraph,
    #[error("non-finite value produced in {op}")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("contrastive loss: every anchor has an empty positive set")]
    NoPositivePairs,
}

pub type NumResult<T> = std::result::Result<T, TensorError>;

/// Clamp floor applied to the second argument of KL before the log.
/// Applied to q only, so kl(p, p) stays exactly zero.
pub const KL_EPS: f64 = 1e-12;

/// Tolerance for validating that KL inputs are row-stochastic.
pub const PROB_ROW_TOL: f64 = 1e-6;
