//! Reverse-mode differentiation over dense tensors.
//!
//! Values live in the scalar type `T`; every gradient is carried in `f64`.
//! The tape has a [`Node::Detached`] leaf kind for values produced outside
//! the tape (the SAR aggregation output). A backward sweep stops at such a
//! leaf and hands its gradient to the caller, who is expected to seed the
//! tape again further down once it has propagated that gradient itself.

mod tape;

pub use tape::{Backward, BatchNormStats, Gradients, Tape, Var};

use crate::error::Result;

/// Sum-all-reduce over every worker. Single-worker code uses [`LocalReducer`].
pub trait Reducer {
    fn allreduce_sum(&mut self, buf: &mut [f64]) -> Result<()>;
}

/// Reducer for a world of one: leaves the buffer as is.
#[derive(Debug, Default, Clone, Copy)]
pub struct LocalReducer;

impl Reducer for LocalReducer {
    fn allreduce_sum(&mut self, _buf: &mut [f64]) -> Result<()> {
        Ok(())
    }
}

/// Reference computation used by the tests and by [`Tape::nll_loss`]:
/// mean negative log-likelihood over `rows`, divided by `normalizer`.
/// Returns the loss and the gradient w.r.t. the logits.
pub fn log_softmax_nll<T: crate::Scalar>(
    logits: &crate::Tensor<T>,
    labels: &[usize],
    rows: &[usize],
    normalizer: f64,
) -> Result<(f64, crate::Tensor<f64>)> {
    tape::nll_forward_backward(logits, labels, rows, normalizer)
}
