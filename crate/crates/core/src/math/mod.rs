//! Deterministic numeric kernels shared by every model: the step-major
//! tensor, diagonal Gaussian operations and reproducible random streams.

mod gaussian;
pub mod linalg;
mod rng;
mod tensor;

pub use gaussian::{
    gaussian_kl, gaussian_log_prob, gaussian_sample, kl_mc_estimate, kl_term, log_prob_term,
    GaussianSeq, McEstimate, StepTotals, HALF_LN_2PI,
};
pub use rng::{splitmix64, RngState, RngStream};
pub(crate) use tensor::gemm;
pub use tensor::{decode_f64s, encode_f64s, serde_f64s, SeqTensor};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MathError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("empty shape {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("expected {expected} values, got {actual}")]
    DataLength { expected: usize, actual: usize },
    #[error("{context}: non-finite value at index {index}")]
    NonFinite { context: &'static str, index: usize },
    #[error("row range {start}..{end} out of bounds for {rows} rows")]
    RowRange {
        start: usize,
        end: usize,
        rows: usize,
    },
    #[error("temperature must be a finite value >= 0, got {0}")]
    InvalidTemperature(f64),
    #[error("n_samples must be >= 1, got {0}")]
    InvalidSampleCount(usize),
    #[error("matrix is singular")]
    Singular,
}
