//! The aggregation interface the sequential runtime drives block by block.

use std::sync::Arc;

use crate::error::Result;
use crate::graph::ShardBlock;
use crate::layers::RunningSoftmaxState;
use crate::runtime::{Lease, MemoryTracker};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageFn {
    Identity,
    AttentionPair,
    RelationProjection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregateKind {
    Sum,
    Mean,
    AttentionSoftmax,
    RelationMean,
}

/// Static description of an aggregator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AggregatorSpec {
    /// True when the backward pass needs the source features again, so
    /// remote blocks are re-fetched (case 2).
    pub needs_input_rematerialization: bool,
    pub message_fn: MessageFn,
    pub aggregate: AggregateKind,
    pub has_theta: bool,
}

/// Running aggregate of one layer on one worker.
#[derive(Debug)]
pub struct AggregationState<T: Scalar> {
    /// `|V_p| × out_width`, accumulated in f64.
    pub acc: Tensor<f64>,
    pub softmax_state: Option<RunningSoftmaxState>,
    pub saved_local_z: Option<Arc<Tensor<T>>>,
    /// Aggregator-private buffers (attention scores, cached coefficients).
    pub scratch: Vec<Vec<f64>>,
    /// Source rows kept for the backward pass (retaining policy only).
    pub retained: Vec<Arc<Tensor<T>>>,
    pub(crate) leases: Vec<Lease>,
}

impl<T: Scalar> AggregationState<T> {
    pub fn new(rows: usize, width: usize) -> Self {
        AggregationState {
            acc: Tensor::zeros(rows, width),
            softmax_state: None,
            saved_local_z: None,
            scratch: Vec::new(),
            retained: Vec::new(),
            leases: Vec::new(),
        }
    }

    /// Keeps `lease` alive as long as this state.
    pub fn hold(&mut self, lease: Lease) {
        self.leases.push(lease);
    }
}

/// Per-block gradient outputs of [`Aggregator::backward_block`].
pub struct BlockGrads<'a> {
    /// Gradient w.r.t. the local destination features, `|V_p| × in_width`.
    pub local: &'a mut Tensor<f64>,
    /// Gradient w.r.t. this block's source rows, `num_src × in_width`.
    pub src: &'a mut Tensor<f64>,
    /// Aggregator parameter gradients, shaped as [`Aggregator::theta_buffers`].
    pub theta: &'a mut [Tensor<f64>],
}

/// A message + aggregation operator that can be evaluated one shard block
/// at a time. `z` rows have `in_width` columns; the aggregate has
/// `out_width`.
pub trait Aggregator<T: Scalar>: Sync {
    fn spec(&self) -> AggregatorSpec;
    fn in_width(&self) -> usize;
    fn out_width(&self) -> usize;

    fn begin(&self, _st: &mut AggregationState<T>, _local_z: &Tensor<T>) -> Result<()> {
        Ok(())
    }

    fn fold_block(
        &self,
        st: &mut AggregationState<T>,
        block: &ShardBlock,
        src: &Tensor<T>,
        local_z: &Tensor<T>,
        mem: &MemoryTracker,
    ) -> Result<()>;

    /// Folds a partial aggregate over a disjoint set of blocks into `st`.
    fn merge(&self, st: &mut AggregationState<T>, other: &AggregationState<T>) -> Result<()>;

    fn finish(&self, _st: &mut AggregationState<T>) -> Result<()> {
        Ok(())
    }

    /// Aggregation over all blocks at once, with every source block in
    /// memory. Used by the retaining (vanilla) policy.
    fn fold_all(
        &self,
        st: &mut AggregationState<T>,
        blocks: &[&ShardBlock],
        srcs: &[&Tensor<T>],
        local_z: &Tensor<T>,
        mem: &MemoryTracker,
    ) -> Result<()> {
        for (b, s) in blocks.iter().zip(srcs) {
            self.fold_block(st, b, s, local_z, mem)?;
        }
        Ok(())
    }

    fn theta_buffers(&self) -> Vec<Tensor<f64>> {
        Vec::new()
    }

    fn begin_backward(&self, _st: &mut AggregationState<T>, _e_acc: &Tensor<f64>) -> Result<()> {
        Ok(())
    }

    /// Gradient contributions of one block. `src` is present iff the spec
    /// requires input rematerialization.
    #[allow(clippy::too_many_arguments)]
    fn backward_block(
        &self,
        st: &AggregationState<T>,
        e_acc: &Tensor<f64>,
        block: &ShardBlock,
        src: Option<&Tensor<T>>,
        local_z: &Tensor<T>,
        out: BlockGrads<'_>,
        mem: &MemoryTracker,
    ) -> Result<()>;

    /// Backward over all retained blocks; `src_grads[k]` matches `blocks[k]`.
    #[allow(clippy::too_many_arguments)]
    fn backward_all(
        &self,
        st: &AggregationState<T>,
        e_acc: &Tensor<f64>,
        blocks: &[&ShardBlock],
        srcs: &[&Tensor<T>],
        local_z: &Tensor<T>,
        local_grad: &mut Tensor<f64>,
        src_grads: &mut [Tensor<f64>],
        theta: &mut [Tensor<f64>],
        mem: &MemoryTracker,
    ) -> Result<()> {
        let remat = self.spec().needs_input_rematerialization;
        for ((b, s), g) in blocks.iter().zip(srcs).zip(src_grads.iter_mut()) {
            let src = if remat { Some(*s) } else { None };
            let out = BlockGrads {
                local: local_grad,
                src: g,
                theta,
            };
            self.backward_block(st, e_acc, b, src, local_z, out, mem)?;
        }
        Ok(())
    }

    /// Maps the raw θ buffers onto gradients of the layer's parameters.
    fn finalize_theta(&self, raw: Vec<Tensor<f64>>) -> Result<Vec<Tensor<f64>>> {
        Ok(raw)
    }
}
