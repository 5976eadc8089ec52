use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::time::Duration;

use super::mailbox::{sum_in_rank_order, Mailbox};
use super::Transport;
use crate::error::{protocol_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// In-process transport; all workers of a world share their mailboxes.
pub struct LoopbackTransport<T> {
    rank: usize,
    boxes: Arc<Vec<Mailbox<T>>>,
    seq: AtomicU32,
}

/// Creates `n` connected loopback handles, one per rank.
pub fn loopback_world<T: Scalar>(n: usize, timeout: Duration) -> Vec<LoopbackTransport<T>> {
    let boxes = Arc::new((0..n).map(|_| Mailbox::new(timeout)).collect::<Vec<_>>());
    (0..n)
        .map(|rank| LoopbackTransport {
            rank,
            boxes: boxes.clone(),
            seq: AtomicU32::new(0),
        })
        .collect()
}

impl<T: Scalar> LoopbackTransport<T> {
    fn peer(&self, peer: usize) -> Result<&Mailbox<T>> {
        self.boxes.get(peer).ok_or_else(|| {
            protocol_err!(
                "worker {peer} is not part of a world of {}",
                self.boxes.len()
            )
        })
    }

    fn check_alive(&self) -> Result<()> {
        match self.boxes[self.rank].aborted() {
            Some(r) => Err(crate::Error::Aborted(r)),
            None => Ok(()),
        }
    }
}

impl<T: Scalar> Transport<T> for LoopbackTransport<T> {
    fn rank(&self) -> usize {
        self.rank
    }

    fn world_size(&self) -> usize {
        self.boxes.len()
    }

    fn publish(&self, key: u32, rows: Arc<Tensor<T>>) -> Result<()> {
        self.boxes[self.rank].publish(key, rows);
        Ok(())
    }

    fn unpublish(&self, key: u32) {
        self.boxes[self.rank].unpublish(key);
    }

    fn fetch_rows(&self, peer: usize, key: u32, ids: &[u32]) -> Result<Tensor<T>> {
        self.check_alive()?;
        let snap = self.peer(peer)?.snapshot(key)?;
        gather_checked(&snap, ids)
    }

    fn send_error(&self, peer: usize, key: u32, grad: Tensor<T>) -> Result<()> {
        self.check_alive()?;
        self.peer(peer)?.push_error(key, self.rank, grad);
        Ok(())
    }

    fn recv_errors(&self, key: u32, expected: usize) -> Result<Vec<(usize, Tensor<T>)>> {
        self.boxes[self.rank].take_errors(key, expected)
    }

    fn allreduce_sum(&self, buf: &mut [f64]) -> Result<()> {
        let seq = self.seq.fetch_add(1, Ordering::Relaxed);
        let n = self.boxes.len();
        self.boxes[0].push_reduce_part(seq, self.rank, buf.to_vec())?;
        let sum = if self.rank == 0 {
            let parts = self.boxes[0].take_reduce_parts(seq, n)?;
            let sum = sum_in_rank_order(&parts)?;
            for b in &self.boxes[1..] {
                b.push_reduce_result(seq, sum.clone());
            }
            sum
        } else {
            self.boxes[self.rank].take_reduce_result(seq)?
        };
        if sum.len() != buf.len() {
            return Err(protocol_err!(
                "all-reduce result has {} entries, expected {}",
                sum.len(),
                buf.len()
            ));
        }
        buf.copy_from_slice(&sum);
        Ok(())
    }

    fn barrier(&self) -> Result<()> {
        let seq = self.seq.fetch_add(1, Ordering::Relaxed);
        let n = self.boxes.len();
        self.boxes[0].arrive_barrier(seq);
        if self.rank == 0 {
            self.boxes[0].wait_barrier(seq, n)?;
            for b in &self.boxes[1..] {
                b.arrive_barrier(seq);
            }
            Ok(())
        } else {
            self.boxes[self.rank].wait_barrier(seq, 1)
        }
    }

    fn abort(&self, reason: &str) {
        for b in self.boxes.iter() {
            b.abort(reason);
        }
    }
}

/// Rows `ids` of `snap`, rejecting out-of-range ids.
pub(crate) fn gather_checked<T: Scalar>(snap: &Tensor<T>, ids: &[u32]) -> Result<Tensor<T>> {
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= snap.rows()) {
        return Err(protocol_err!(
            "requested row {bad} of a {}-row snapshot",
            snap.rows()
        ));
    }
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    Ok(snap.gather_rows(&idx))
}
