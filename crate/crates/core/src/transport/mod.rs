//! Point-to-point and collective communication between workers.
//!
//! Two implementations share one receive-side [`mailbox`]: an in-process
//! loopback world (one thread per worker) and a TCP transport (one process
//! per worker). Collectives gather to rank 0, which sums contributions in
//! rank order and broadcasts the result, so every worker sees bitwise the
//! same sum.

mod loopback;
mod mailbox;
mod tcp;
pub mod wire;

use std::sync::Arc;
use std::time::Duration;

pub use loopback::{loopback_world, LoopbackTransport};
pub use tcp::{parse_rankfile, read_rankfile, resolve_rank, TcpTransport, ENV_RANK, ENV_RANKFILE};

use crate::autodiff::Reducer;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default bound on every blocking wait.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

/// A worker's handle to the communication layer.
pub trait Transport<T: Scalar>: Send + Sync {
    fn rank(&self) -> usize;
    fn world_size(&self) -> usize;

    /// Makes `rows` available to remote fetches under `key`.
    fn publish(&self, key: u32, rows: Arc<Tensor<T>>) -> Result<()>;
    fn unpublish(&self, key: u32);

    /// Rows `ids` (owner-local indices) of `peer`'s snapshot `key`, in
    /// request order. Blocks until the snapshot is published.
    fn fetch_rows(&self, peer: usize, key: u32, ids: &[u32]) -> Result<Tensor<T>>;

    fn send_error(&self, peer: usize, key: u32, grad: Tensor<T>) -> Result<()>;

    /// Exactly `expected` error messages for `key`, sorted by sender.
    fn recv_errors(&self, key: u32, expected: usize) -> Result<Vec<(usize, Tensor<T>)>>;

    /// Elementwise sum over all workers, identical on every worker.
    fn allreduce_sum(&self, buf: &mut [f64]) -> Result<()>;

    fn barrier(&self) -> Result<()>;

    /// Fails every pending and future wait on every reachable worker.
    fn abort(&self, reason: &str);
}

/// Adapts a transport to the tape's [`Reducer`], recording payload bytes.
pub struct TransportReducer<'a, T: Scalar> {
    pub transport: &'a dyn Transport<T>,
    pub comm: Option<&'a crate::runtime::CommLedger>,
}

impl<T: Scalar> Reducer for TransportReducer<'_, T> {
    fn allreduce_sum(&mut self, buf: &mut [f64]) -> Result<()> {
        if let Some(c) = self.comm {
            c.record(crate::runtime::CommPhase::AllReduce, (buf.len() * 8) as u64);
        }
        self.transport.allreduce_sum(buf)
    }
}
