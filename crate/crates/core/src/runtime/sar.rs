//! Sequential aggregation (forward) and rematerialized backward over the
//! shard blocks of one layer on one worker.

use std::sync::mpsc::sync_channel;
use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{input_err, protocol_err, Error, Result};
use crate::graph::{PartitionLayout, ShardBlock};
use crate::optim::ParamStore;
use crate::runtime::{
    AggregationState, Aggregator, AllocTag, BlockGrads, CommLedger, CommPhase, Lease, MemoryTracker,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transport::Transport;

/// What happens to fetched remote rows between forward and backward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RematPolicy {
    /// Free each block after use; re-fetch in backward when needed.
    Sar,
    /// Keep every fetched block until the backward pass (vanilla domain
    /// parallel training). Attention uses the fully materialized kernel.
    Retain,
}

/// Routing of one layer's shard blocks on one worker.
#[derive(Debug, Clone)]
pub struct BlockPlan {
    pub rank: usize,
    pub local_rows: usize,
    /// Blocks into this worker, indexed by source partition.
    pub blocks: Vec<ShardBlock>,
    /// Owner-local row ids of each block's sources.
    pub requests: Vec<Vec<u32>>,
    /// For each peer `q`, the local rows its error message refers to (the
    /// sources of block `(q, rank)`, in order).
    pub incoming: Vec<Vec<u32>>,
}

impl BlockPlan {
    /// `all[p][q]` are the blocks from partition `q` into `p`, identical on
    /// every worker.
    pub fn new(all: &[Vec<ShardBlock>], layout: &PartitionLayout, rank: usize) -> Result<Self> {
        let n = layout.num_parts();
        if all.len() != n || all.iter().any(|row| row.len() != n) || rank >= n {
            return Err(input_err!(
                "shard block table does not match {n} partitions"
            ));
        }
        let local = |ids: &[u32]| -> Vec<u32> {
            ids.iter()
                .map(|&g| layout.local_index(g as usize) as u32)
                .collect()
        };
        Ok(BlockPlan {
            rank,
            local_rows: layout.part_size(rank),
            blocks: all[rank].clone(),
            requests: all[rank].iter().map(|b| local(&b.src_global_ids)).collect(),
            incoming: (0..n)
                .map(|q| local(&all[q][rank].src_global_ids))
                .collect(),
        })
    }

    pub fn num_parts(&self) -> usize {
        self.blocks.len()
    }

    /// Blocks restricted to destinations flagged in `active` (global node
    /// mask), applied consistently to the whole table.
    pub fn restricted_table(
        all: &[Vec<ShardBlock>],
        layout: &PartitionLayout,
        active: &[bool],
    ) -> Vec<Vec<ShardBlock>> {
        all.iter()
            .enumerate()
            .map(|(p, row)| {
                let mask: Vec<bool> = layout
                    .members(p)
                    .iter()
                    .map(|&g| active[g as usize])
                    .collect();
                row.iter()
                    .map(|b| b.restrict_to_destinations(&mask))
                    .collect()
            })
            .collect()
    }
}

/// Snapshot key of one layer's features: unique per epoch, pass and layer.
pub fn snapshot_key(epoch: usize, eval: bool, layer: usize) -> u32 {
    debug_assert!(layer < 32);
    ((epoch as u32) << 6) | ((eval as u32) << 5) | (layer as u32 & 31)
}

/// Everything the runtime needs besides the layer itself.
pub struct SarContext<'a, T: Scalar> {
    pub transport: &'a dyn Transport<T>,
    pub memory: &'a MemoryTracker,
    pub comm: &'a CommLedger,
    pub prefetch: bool,
    pub policy: RematPolicy,
}

/// Source rows of one block; remote rows carry their residency lease.
struct BlockRows<T> {
    rows: Arc<Tensor<T>>,
    lease: Option<Lease>,
}

/// Visits blocks `q = 0..N-1` in order. When `fetch` is set, each block
/// with sources comes with its rows: local rows are gathered directly,
/// remote rows are fetched (one block ahead when prefetching).
fn stream_blocks<T: Scalar>(
    ctx: &SarContext<'_, T>,
    plan: &BlockPlan,
    key: u32,
    phase: CommPhase,
    local_z: &Tensor<T>,
    fetch: bool,
    mut visit: impl FnMut(usize, Option<BlockRows<T>>) -> Result<()>,
) -> Result<()> {
    let n = plan.num_parts();
    let p = plan.rank;
    let width = local_z.cols();
    let needs_fetch = |q: usize| fetch && q != p && plan.blocks[q].num_src() > 0;
    let fetch_one = |q: usize| -> Result<BlockRows<T>> {
        let ids = &plan.requests[q];
        let t = ctx.transport.fetch_rows(q, key, ids)?;
        if t.rows() != ids.len() || t.cols() != width {
            return Err(protocol_err!(
                "worker {q} sent {:?} rows for a block of {} sources x {width}",
                t.shape(),
                ids.len()
            ));
        }
        ctx.comm.record(phase, t.nbytes() as u64);
        let lease = ctx.memory.lease_block(t.nbytes());
        Ok(BlockRows {
            rows: Arc::new(t),
            lease: Some(lease),
        })
    };
    let local_rows = |q: usize| -> Option<BlockRows<T>> {
        if !fetch || plan.blocks[q].num_src() == 0 {
            return None;
        }
        let idx: Vec<usize> = plan.requests[q].iter().map(|&i| i as usize).collect();
        Some(BlockRows {
            rows: Arc::new(local_z.gather_rows(&idx)),
            lease: None,
        })
    };

    if !ctx.prefetch {
        for q in 0..n {
            let rows = if needs_fetch(q) {
                Some(fetch_one(q)?)
            } else {
                local_rows(q)
            };
            visit(q, rows)?;
            ctx.memory.note_block_end();
        }
        return Ok(());
    }

    let remote: Vec<usize> = (0..n).filter(|&q| needs_fetch(q)).collect();
    std::thread::scope(|s| {
        // Rendezvous channel: the agent holds at most one fetched block
        // while the worker processes the current one.
        let (tx, rx) = sync_channel::<Result<(usize, BlockRows<T>)>>(0);
        let fetch_one = &fetch_one;
        s.spawn(move || {
            for q in remote {
                let r = fetch_one(q).map(|b| (q, b));
                let failed = r.is_err();
                if tx.send(r).is_err() || failed {
                    break;
                }
            }
        });
        for q in 0..n {
            let rows = if needs_fetch(q) {
                let (got, b) = rx
                    .recv()
                    .map_err(|_| Error::Contract("prefetch agent exited early".into()))??;
                if got != q {
                    return Err(Error::Contract(format!(
                        "prefetched block {got}, expected {q}"
                    )));
                }
                Some(b)
            } else {
                local_rows(q)
            };
            visit(q, rows)?;
            ctx.memory.note_block_end();
        }
        Ok(())
    })
}

/// Forward aggregation of one layer. Publishes `local_z` under `key` for
/// the other workers, then folds the blocks in order with tape recording
/// paused. When a tape is given the aggregate is registered on it as a
/// detached leaf tagged `tag`.
pub fn sar_forward<T: Scalar>(
    agg: &dyn Aggregator<T>,
    key: u32,
    local_z: Arc<Tensor<T>>,
    plan: &BlockPlan,
    ctx: &SarContext<'_, T>,
    tape: Option<&mut Tape<T>>,
    tag: usize,
) -> Result<(AggregationState<T>, Option<Var>)> {
    if local_z.rows() != plan.local_rows || local_z.cols() != agg.in_width() {
        return Err(input_err!(
            "local features {:?}, expected ({}, {})",
            local_z.shape(),
            plan.local_rows,
            agg.in_width()
        ));
    }
    ctx.transport.publish(key, local_z.clone())?;
    let mut st = AggregationState::new(plan.local_rows, agg.out_width());
    st.hold(ctx.memory.lease(AllocTag::LocalFeatures, local_z.nbytes()));

    let mut tape = tape;
    let was_recording = tape.as_ref().is_some_and(|t| t.is_recording());
    if let Some(t) = tape.as_deref_mut() {
        t.set_recording(false);
    }
    let result = aggregate(agg, key, &local_z, plan, ctx, &mut st);
    if let Some(t) = tape.as_deref_mut() {
        t.set_recording(was_recording);
    }
    result?;

    let var = match tape {
        Some(t) => Some(t.detached(st.acc.cast::<T>(), tag)?),
        None => None,
    };
    st.saved_local_z = Some(local_z);
    Ok((st, var))
}

fn aggregate<T: Scalar>(
    agg: &dyn Aggregator<T>,
    key: u32,
    local_z: &Tensor<T>,
    plan: &BlockPlan,
    ctx: &SarContext<'_, T>,
    st: &mut AggregationState<T>,
) -> Result<()> {
    agg.begin(st, local_z)?;
    match ctx.policy {
        RematPolicy::Sar => {
            stream_blocks(
                ctx,
                plan,
                key,
                CommPhase::ForwardFeatures,
                local_z,
                true,
                |q, rows| match rows {
                    Some(b) => agg.fold_block(st, &plan.blocks[q], &b.rows, local_z, ctx.memory),
                    None => Ok(()),
                },
            )?;
        }
        RematPolicy::Retain => {
            let mut kept: Vec<Arc<Tensor<T>>> = Vec::with_capacity(plan.num_parts());
            let mut leases = Vec::new();
            stream_blocks(
                ctx,
                plan,
                key,
                CommPhase::ForwardFeatures,
                local_z,
                true,
                |_, rows| {
                    match rows {
                        Some(b) => {
                            kept.push(b.rows);
                            leases.extend(b.lease);
                        }
                        None => kept.push(Arc::new(Tensor::zeros(0, local_z.cols()))),
                    }
                    Ok(())
                },
            )?;
            let blocks: Vec<&ShardBlock> = plan.blocks.iter().collect();
            let srcs: Vec<&Tensor<T>> = kept.iter().map(|t| t.as_ref()).collect();
            agg.fold_all(st, &blocks, &srcs, local_z, ctx.memory)?;
            st.retained = kept;
            for l in leases {
                st.hold(l);
            }
        }
    }
    agg.finish(st)
}

/// Backward of one layer's aggregation. Sends each peer its error message,
/// collects the messages addressed to this worker and returns the
/// gradient w.r.t. `local_z` (accumulated over senders in rank order)
/// together with the aggregator's parameter gradients.
pub fn sar_backward<T: Scalar>(
    agg: &dyn Aggregator<T>,
    key: u32,
    mut st: AggregationState<T>,
    e_acc: &Tensor<f64>,
    plan: &BlockPlan,
    ctx: &SarContext<'_, T>,
) -> Result<(Tensor<f64>, Vec<Tensor<f64>>)> {
    let local_z = st
        .saved_local_z
        .clone()
        .ok_or_else(|| Error::Contract("backward without saved local features".into()))?;
    if e_acc.shape() != st.acc.shape() {
        return Err(input_err!(
            "aggregate error shape {:?}, expected {:?}",
            e_acc.shape(),
            st.acc.shape()
        ));
    }
    let n = plan.num_parts();
    let p = plan.rank;
    let width = agg.in_width();
    agg.begin_backward(&mut st, e_acc)?;
    let mut own = Tensor::<f64>::zeros(plan.local_rows, width);
    let mut theta = agg.theta_buffers();
    let mut own_src: Option<Tensor<f64>> = None;

    let emit = |q: usize, src_err: Tensor<f64>, own_src: &mut Option<Tensor<f64>>| -> Result<()> {
        if q == p {
            *own_src = Some(src_err);
            return Ok(());
        }
        let msg = src_err.cast::<T>();
        ctx.comm
            .record(CommPhase::BackwardGradients, msg.nbytes() as u64);
        ctx.transport.send_error(q, key, msg)
    };

    match ctx.policy {
        RematPolicy::Sar => {
            let remat = agg.spec().needs_input_rematerialization;
            stream_blocks(
                ctx,
                plan,
                key,
                CommPhase::BackwardFeatures,
                &local_z,
                remat,
                |q, rows| {
                    let block = &plan.blocks[q];
                    let mut src_err = Tensor::<f64>::zeros(block.num_src(), width);
                    if !block.is_empty() {
                        let out = BlockGrads {
                            local: &mut own,
                            src: &mut src_err,
                            theta: &mut theta,
                        };
                        let src = rows.as_ref().map(|b| b.rows.as_ref());
                        agg.backward_block(&st, e_acc, block, src, &local_z, out, ctx.memory)?;
                    }
                    drop(rows);
                    emit(q, src_err, &mut own_src)
                },
            )?;
        }
        RematPolicy::Retain => {
            let blocks: Vec<&ShardBlock> = plan.blocks.iter().collect();
            let srcs: Vec<&Tensor<T>> = st.retained.iter().map(|t| t.as_ref()).collect();
            if srcs.len() != n {
                return Err(Error::Contract(
                    "retained blocks missing for backward".into(),
                ));
            }
            let mut src_errs: Vec<Tensor<f64>> = blocks
                .iter()
                .map(|b| Tensor::zeros(b.num_src(), width))
                .collect();
            agg.backward_all(
                &st,
                e_acc,
                &blocks,
                &srcs,
                &local_z,
                &mut own,
                &mut src_errs,
                &mut theta,
                ctx.memory,
            )?;
            for (q, e) in src_errs.into_iter().enumerate() {
                emit(q, e, &mut own_src)?;
            }
        }
    }
    if let Some(e) = own_src {
        scatter_rows(&mut own, &plan.incoming[p], &e)?;
    }

    let received = ctx.transport.recv_errors(key, n - 1)?;
    let mut e_p = Tensor::<f64>::zeros(plan.local_rows, width);
    let mut peers = received.into_iter().peekable();
    for q in 0..n {
        if q == p {
            e_p.add_assign(&own);
            continue;
        }
        let (sender, msg) = peers
            .next()
            .ok_or_else(|| protocol_err!("no error message from worker {q}"))?;
        if sender != q {
            return Err(protocol_err!(
                "unexpected error message from worker {sender}"
            ));
        }
        if msg.rows() != plan.incoming[q].len() || msg.cols() != width {
            return Err(protocol_err!(
                "error message from worker {q} has shape {:?}, expected ({}, {width})",
                msg.shape(),
                plan.incoming[q].len()
            ));
        }
        scatter_rows(&mut e_p, &plan.incoming[q], &msg)?;
    }
    ctx.transport.unpublish(key);
    drop(st);
    Ok((e_p, agg.finalize_theta(theta)?))
}

fn scatter_rows<U: Scalar>(dst: &mut Tensor<f64>, rows: &[u32], src: &Tensor<U>) -> Result<()> {
    if src.rows() != rows.len() || src.cols() != dst.cols() {
        return Err(protocol_err!(
            "error rows {:?} do not match {} targets",
            src.shape(),
            rows.len()
        ));
    }
    for (k, &r) in rows.iter().enumerate() {
        dst.add_to_row(r as usize, src.row(k));
    }
    Ok(())
}

/// Sums trainable parameter gradients over all workers (rank order).
pub fn allreduce_param_grads<T: Scalar>(
    params: &mut ParamStore<T>,
    transport: &dyn Transport<T>,
    comm: &CommLedger,
) -> Result<()> {
    let mut flat = params.flat_grads();
    comm.record(CommPhase::AllReduce, (flat.len() * 8) as u64);
    transport.allreduce_sum(&mut flat)?;
    params.set_flat_grads(&flat)
}
