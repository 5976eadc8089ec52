//! Sequential aggregation with rematerialization.
//!
//! A layer's aggregation is evaluated one shard block at a time: the rows
//! of remote partitions are fetched, folded into a running aggregate and
//! freed. The backward pass walks the blocks again, re-fetching the rows
//! when the aggregator's gradient depends on them, and exchanges per-block
//! error messages with the other workers.

mod aggregator;
mod ledger;
mod sar;

pub use aggregator::{
    AggregateKind, AggregationState, Aggregator, AggregatorSpec, BlockGrads, MessageFn,
};
pub use ledger::{
    ledger_check, AllocTag, CommCounts, CommLedger, CommPhase, Lease, LedgerReport, MemoryLedger,
    MemoryTracker,
};
pub use sar::{
    allreduce_param_grads, sar_backward, sar_forward, snapshot_key, BlockPlan, RematPolicy,
    SarContext,
};
