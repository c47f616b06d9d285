//! Reverse-mode differentiation over a closed set of matrix operations, a
//! named parameter store with Adam, and a finite-difference checker.
//!
//! A [`Graph`] records one forward computation; [`Graph::backward`] runs once
//! and returns [`Gradients`], which are then accumulated into a
//! [`ParamStore`]. Every op has a finite-difference test in
//! `tests/autodiff_ops.rs`.

pub mod gradcheck;
mod graph;
mod params;

pub use graph::{Gradients, Graph, Var};
pub use params::{AdamConfig, ParamId, ParamSnapshot, ParamStore};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("backward already ran on this graph")]
    DoubleBackward,
    #[error("loss must be a 1x1 scalar, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("learning rate must be > 0, got {0}")]
    InvalidLearningRate(f64),
    #[error("adam_step called with no accumulated gradients")]
    NoGradients,
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("duplicate parameter {0}")]
    DuplicateParam(String),
}
