//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive application; [`Graph::backward`]
//! replays the record in reverse to accumulate gradients. Parameters live in
//! a [`ParamRegistry`] whose frozen set never receives optimizer updates.

mod check;
mod graph;
mod ops;
mod real;
mod registry;
mod weights;

pub use check::{finite_diff_check, FdOutcome, FdReport};
pub use graph::{Gradients, Graph, TensorData, Var};
pub use real::Real;
pub use registry::{ParamRegistry, SgdMomentum};
pub use weights::{load_weights, save_weights};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("loss must be scalar, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("data length {len} does not match shape {shape:?}")]
    BadLength { len: usize, shape: Vec<usize> },
    #[error("weight container: {0}")]
    BadContainer(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<V> = std::result::Result<V, TensorError>;
