//! Per-worker receive side shared by both transports: published snapshots,
//! incoming error messages and all-reduce buffers.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use crate::error::{protocol_err, Error, Result};
use crate::tensor::Tensor;

struct State<T> {
    snapshots: HashMap<u32, Arc<Tensor<T>>>,
    errors: HashMap<u32, Vec<(usize, Tensor<T>)>>,
    reduce_parts: HashMap<u32, BTreeMap<usize, Vec<f64>>>,
    reduce_results: HashMap<u32, Vec<f64>>,
    barrier_arrivals: HashMap<u32, usize>,
    aborted: Option<String>,
}

pub(crate) struct Mailbox<T> {
    state: Mutex<State<T>>,
    cv: Condvar,
    timeout: Duration,
}

impl<T> Mailbox<T> {
    pub(crate) fn new(timeout: Duration) -> Self {
        Mailbox {
            state: Mutex::new(State {
                snapshots: HashMap::new(),
                errors: HashMap::new(),
                reduce_parts: HashMap::new(),
                reduce_results: HashMap::new(),
                barrier_arrivals: HashMap::new(),
                aborted: None,
            }),
            cv: Condvar::new(),
            timeout,
        }
    }

    fn lock(&self) -> MutexGuard<'_, State<T>> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Blocks until `take` yields a value, the mailbox is aborted, or the
    /// timeout passes.
    fn wait<R>(
        &self,
        what: &str,
        mut take: impl FnMut(&mut State<T>) -> Result<Option<R>>,
    ) -> Result<R> {
        let deadline = Instant::now() + self.timeout;
        let mut st = self.lock();
        loop {
            if let Some(reason) = &st.aborted {
                return Err(Error::Aborted(reason.clone()));
            }
            if let Some(v) = take(&mut st)? {
                return Ok(v);
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::Timeout(format!(
                    "gave up after {:.1}s waiting for {what}",
                    self.timeout.as_secs_f64()
                )));
            }
            st = self
                .cv
                .wait_timeout(st, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    pub(crate) fn abort(&self, reason: &str) {
        let mut st = self.lock();
        if st.aborted.is_none() {
            st.aborted = Some(reason.to_string());
        }
        self.cv.notify_all();
    }

    pub(crate) fn aborted(&self) -> Option<String> {
        self.lock().aborted.clone()
    }

    pub(crate) fn publish(&self, key: u32, t: Arc<Tensor<T>>) {
        self.lock().snapshots.insert(key, t);
        self.cv.notify_all();
    }

    pub(crate) fn unpublish(&self, key: u32) {
        self.lock().snapshots.remove(&key);
    }

    pub(crate) fn snapshot(&self, key: u32) -> Result<Arc<Tensor<T>>> {
        self.wait(&format!("snapshot {key:#x}"), |st| {
            Ok(st.snapshots.get(&key).cloned())
        })
    }

    pub(crate) fn push_error(&self, key: u32, src: usize, t: Tensor<T>) {
        self.lock().errors.entry(key).or_default().push((src, t));
        self.cv.notify_all();
    }

    /// Takes exactly `expected` error messages for `key`, sorted by sender.
    pub(crate) fn take_errors(&self, key: u32, expected: usize) -> Result<Vec<(usize, Tensor<T>)>> {
        if expected == 0 {
            return Ok(Vec::new());
        }
        self.wait(&format!("{expected} error messages for {key:#x}"), |st| {
            let ready = st.errors.get(&key).is_some_and(|v| v.len() >= expected);
            if !ready {
                return Ok(None);
            }
            let mut msgs = st.errors.remove(&key).unwrap_or_default();
            msgs.sort_by_key(|(s, _)| *s);
            if msgs.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(protocol_err!("duplicate error message sender for {key:#x}"));
            }
            if msgs.len() != expected {
                return Err(protocol_err!(
                    "received {} error messages for {key:#x}, expected {expected}",
                    msgs.len()
                ));
            }
            Ok(Some(msgs))
        })
    }

    pub(crate) fn push_reduce_part(&self, seq: u32, src: usize, data: Vec<f64>) -> Result<()> {
        let mut st = self.lock();
        let parts = st.reduce_parts.entry(seq).or_default();
        if parts.insert(src, data).is_some() {
            return Err(protocol_err!(
                "duplicate all-reduce contribution from {src}"
            ));
        }
        self.cv.notify_all();
        Ok(())
    }

    /// All `n` contributions for `seq`, in rank order.
    pub(crate) fn take_reduce_parts(&self, seq: u32, n: usize) -> Result<Vec<Vec<f64>>> {
        self.wait(&format!("all-reduce {seq}"), |st| {
            if st.reduce_parts.get(&seq).map_or(0, |p| p.len()) < n {
                return Ok(None);
            }
            Ok(st
                .reduce_parts
                .remove(&seq)
                .map(|p| p.into_values().collect()))
        })
    }

    pub(crate) fn push_reduce_result(&self, seq: u32, data: Vec<f64>) {
        self.lock().reduce_results.insert(seq, data);
        self.cv.notify_all();
    }

    pub(crate) fn take_reduce_result(&self, seq: u32) -> Result<Vec<f64>> {
        self.wait(&format!("all-reduce result {seq}"), |st| {
            Ok(st.reduce_results.remove(&seq))
        })
    }

    pub(crate) fn arrive_barrier(&self, seq: u32) {
        *self.lock().barrier_arrivals.entry(seq).or_default() += 1;
        self.cv.notify_all();
    }

    pub(crate) fn wait_barrier(&self, seq: u32, n: usize) -> Result<()> {
        self.wait(&format!("barrier {seq}"), |st| {
            if st.barrier_arrivals.get(&seq).copied().unwrap_or(0) < n {
                return Ok(None);
            }
            st.barrier_arrivals.remove(&seq);
            Ok(Some(()))
        })
    }
}

/// Sums contributions in rank order starting from zero.
pub(crate) fn sum_in_rank_order(parts: &[Vec<f64>]) -> Result<Vec<f64>> {
    let len = parts.first().map_or(0, Vec::len);
    if parts.iter().any(|p| p.len() != len) {
        return Err(protocol_err!(
            "all-reduce buffers differ in length across workers"
        ));
    }
    let mut out = vec![0.0; len];
    for p in parts {
        for (o, x) in out.iter_mut().zip(p) {
            *o += x;
        }
    }
    Ok(out)
}
