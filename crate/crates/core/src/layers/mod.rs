//! Layer kernels: mean, attention and relational aggregation, distributed
//! batch normalization and the running-max softmax.

pub mod batchnorm;
pub mod gat;
pub mod rgcn;
pub mod sage;
pub mod softmax;

pub use batchnorm::{
    dist_batchnorm_backward, dist_batchnorm_forward, BatchNormState, BN_EPS, BN_MOMENTUM,
};
pub use gat::{
    gat_reference_backward, gat_reference_forward, AttentionAggregator, AttentionKernel,
    GatReferenceCache,
};
pub use rgcn::{basis_grads, basis_weights, relation_degrees, RelationalAggregator};
pub use sage::{global_degrees, MeanAggregator};
pub use softmax::{running_softmax_fold, RunningSoftmaxState};
