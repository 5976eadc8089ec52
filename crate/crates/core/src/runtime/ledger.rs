//! Memory and communication accounting.
//!
//! Remote feature blocks and large transient buffers are held through RAII
//! leases so the ledger can assert the residency bound (local partition plus
//! at most one remote block, or two with prefetching) and detect leaks.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

/// Allocation categories tracked by the memory ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AllocTag {
    LocalFeatures,
    RemoteFeatures,
    EdgeCoefficients,
    Activations,
}

impl AllocTag {
    pub const ALL: [AllocTag; 4] = [
        AllocTag::LocalFeatures,
        AllocTag::RemoteFeatures,
        AllocTag::EdgeCoefficients,
        AllocTag::Activations,
    ];

    fn index(self) -> usize {
        match self {
            AllocTag::LocalFeatures => 0,
            AllocTag::RemoteFeatures => 1,
            AllocTag::EdgeCoefficients => 2,
            AllocTag::Activations => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AllocTag::LocalFeatures => "local-features",
            AllocTag::RemoteFeatures => "remote-features",
            AllocTag::EdgeCoefficients => "edge-coefficients",
            AllocTag::Activations => "activations",
        }
    }
}

/// Snapshot of the memory counters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemoryLedger {
    /// Remote blocks currently held (the local partition is not included).
    pub resident_remote_blocks: usize,
    /// Peak residency in partition-sized blocks, counting the local
    /// partition as one.
    pub peak_resident: usize,
    pub bytes_by_tag: [usize; 4],
    pub peak_bytes_by_tag: [usize; 4],
    pub live_bytes: usize,
    pub peak_bytes: usize,
    /// Shard blocks finished since the last peak reset.
    pub block_ends: usize,
    /// Of those, how many ended with edge-coefficient bytes still live.
    pub dirty_block_ends: usize,
}

impl MemoryLedger {
    pub fn bytes(&self, tag: AllocTag) -> usize {
        self.bytes_by_tag[tag.index()]
    }

    pub fn peak_tag_bytes(&self, tag: AllocTag) -> usize {
        self.peak_bytes_by_tag[tag.index()]
    }
}

/// Shared handle to a worker's memory ledger.
#[derive(Debug, Clone, Default)]
pub struct MemoryTracker {
    inner: Arc<Mutex<MemoryLedger>>,
}

impl MemoryTracker {
    pub fn new() -> Self {
        let t = MemoryTracker::default();
        t.lock().peak_resident = 1;
        t
    }

    fn lock(&self) -> MutexGuard<'_, MemoryLedger> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn snapshot(&self) -> MemoryLedger {
        self.lock().clone()
    }

    /// Restarts peak tracking from the current live state.
    pub fn reset_peaks(&self) {
        let mut l = self.lock();
        l.peak_resident = 1 + l.resident_remote_blocks;
        l.peak_bytes = l.live_bytes;
        l.peak_bytes_by_tag = l.bytes_by_tag;
        l.block_ends = 0;
        l.dirty_block_ends = 0;
    }

    /// Marks the end of one shard block's processing.
    pub fn note_block_end(&self) {
        let mut l = self.lock();
        l.block_ends += 1;
        if l.bytes(AllocTag::EdgeCoefficients) > 0 {
            l.dirty_block_ends += 1;
        }
    }

    fn add_bytes(l: &mut MemoryLedger, tag: AllocTag, bytes: usize) {
        l.bytes_by_tag[tag.index()] += bytes;
        l.peak_bytes_by_tag[tag.index()] =
            l.peak_bytes_by_tag[tag.index()].max(l.bytes_by_tag[tag.index()]);
        l.live_bytes += bytes;
        l.peak_bytes = l.peak_bytes.max(l.live_bytes);
    }

    fn sub_bytes(l: &mut MemoryLedger, tag: AllocTag, bytes: usize) {
        l.bytes_by_tag[tag.index()] -= bytes;
        l.live_bytes -= bytes;
    }

    /// Records `bytes` under `tag` until the lease is dropped.
    pub fn lease(&self, tag: AllocTag, bytes: usize) -> Lease {
        Self::add_bytes(&mut self.lock(), tag, bytes);
        Lease {
            tracker: self.clone(),
            tag,
            bytes,
            block: false,
        }
    }

    /// Records one resident remote block of `bytes`.
    pub fn lease_block(&self, bytes: usize) -> Lease {
        let mut l = self.lock();
        l.resident_remote_blocks += 1;
        l.peak_resident = l.peak_resident.max(1 + l.resident_remote_blocks);
        Self::add_bytes(&mut l, AllocTag::RemoteFeatures, bytes);
        drop(l);
        Lease {
            tracker: self.clone(),
            tag: AllocTag::RemoteFeatures,
            bytes,
            block: true,
        }
    }
}

/// Live allocation record; released on drop.
#[derive(Debug)]
pub struct Lease {
    tracker: MemoryTracker,
    tag: AllocTag,
    bytes: usize,
    block: bool,
}

impl Lease {
    /// Changes the recorded size in place.
    pub fn resize(&mut self, bytes: usize) {
        let mut l = self.tracker.lock();
        MemoryTracker::sub_bytes(&mut l, self.tag, self.bytes);
        MemoryTracker::add_bytes(&mut l, self.tag, bytes);
        self.bytes = bytes;
    }

    pub fn bytes(&self) -> usize {
        self.bytes
    }
}

impl Drop for Lease {
    fn drop(&mut self) {
        let mut l = self.tracker.lock();
        MemoryTracker::sub_bytes(&mut l, self.tag, self.bytes);
        if self.block {
            l.resident_remote_blocks -= 1;
        }
    }
}

/// Outcome of [`ledger_check`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerReport {
    pub passed: bool,
    pub peak_resident: usize,
    pub limit: usize,
    pub leaked_blocks: usize,
}

impl std::fmt::Display for LedgerReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: peak_resident={} limit={} leaked_blocks={}",
            if self.passed { "PASS" } else { "FAIL" },
            self.peak_resident,
            self.limit,
            self.leaked_blocks
        )
    }
}

/// Checks the residency bound at epoch end: at most 2 resident blocks
/// without prefetch, 3 with, and no remote block still held.
pub fn ledger_check(ledger: &MemoryLedger, prefetch: bool) -> LedgerReport {
    let limit = if prefetch { 3 } else { 2 };
    LedgerReport {
        passed: ledger.peak_resident <= limit && ledger.resident_remote_blocks == 0,
        peak_resident: ledger.peak_resident,
        limit,
        leaked_blocks: ledger.resident_remote_blocks,
    }
}

/// Payload byte counters per communication phase (headers excluded).
#[derive(Debug, Default)]
pub struct CommLedger {
    fwd_feature_bytes: AtomicU64,
    bwd_feature_bytes: AtomicU64,
    bwd_gradient_bytes: AtomicU64,
    allreduce_bytes: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommPhase {
    ForwardFeatures,
    BackwardFeatures,
    BackwardGradients,
    AllReduce,
}

/// Plain copy of the communication counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommCounts {
    pub fwd_feature_bytes: u64,
    pub bwd_feature_bytes: u64,
    pub bwd_gradient_bytes: u64,
    pub allreduce_bytes: u64,
}

impl CommCounts {
    /// Point-to-point feature and gradient traffic.
    pub fn total_p2p(&self) -> u64 {
        self.fwd_feature_bytes + self.bwd_feature_bytes + self.bwd_gradient_bytes
    }
}

impl std::ops::Add for CommCounts {
    type Output = CommCounts;
    fn add(self, o: CommCounts) -> CommCounts {
        CommCounts {
            fwd_feature_bytes: self.fwd_feature_bytes + o.fwd_feature_bytes,
            bwd_feature_bytes: self.bwd_feature_bytes + o.bwd_feature_bytes,
            bwd_gradient_bytes: self.bwd_gradient_bytes + o.bwd_gradient_bytes,
            allreduce_bytes: self.allreduce_bytes + o.allreduce_bytes,
        }
    }
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    fn counter(&self, phase: CommPhase) -> &AtomicU64 {
        match phase {
            CommPhase::ForwardFeatures => &self.fwd_feature_bytes,
            CommPhase::BackwardFeatures => &self.bwd_feature_bytes,
            CommPhase::BackwardGradients => &self.bwd_gradient_bytes,
            CommPhase::AllReduce => &self.allreduce_bytes,
        }
    }

    pub fn record(&self, phase: CommPhase, bytes: u64) {
        self.counter(phase).fetch_add(bytes, Ordering::Relaxed);
    }

    pub fn reset(&self) {
        for p in [
            CommPhase::ForwardFeatures,
            CommPhase::BackwardFeatures,
            CommPhase::BackwardGradients,
            CommPhase::AllReduce,
        ] {
            self.counter(p).store(0, Ordering::Relaxed);
        }
    }

    pub fn counts(&self) -> CommCounts {
        CommCounts {
            fwd_feature_bytes: self.fwd_feature_bytes.load(Ordering::Relaxed),
            bwd_feature_bytes: self.bwd_feature_bytes.load(Ordering::Relaxed),
            bwd_gradient_bytes: self.bwd_gradient_bytes.load(Ordering::Relaxed),
            allreduce_bytes: self.allreduce_bytes.load(Ordering::Relaxed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leases_release_on_drop() {
        let t = MemoryTracker::new();
        {
            let _a = t.lease(AllocTag::EdgeCoefficients, 64);
            let _b = t.lease_block(100);
            let s = t.snapshot();
            assert_eq!(s.bytes(AllocTag::EdgeCoefficients), 64);
            assert_eq!(s.resident_remote_blocks, 1);
            assert_eq!(s.peak_resident, 2);
            assert_eq!(s.live_bytes, 164);
        }
        let s = t.snapshot();
        assert_eq!(s.live_bytes, 0);
        assert_eq!(s.peak_bytes, 164);
        assert!(ledger_check(&s, false).passed);
    }

    #[test]
    fn single_worker_peak_is_one() {
        let t = MemoryTracker::new();
        assert_eq!(t.snapshot().peak_resident, 1);
    }

    #[test]
    fn check_fails_on_excess_or_leak() {
        let t = MemoryTracker::new();
        let a = t.lease_block(1);
        let b = t.lease_block(1);
        assert!(!ledger_check(&t.snapshot(), false).passed);
        drop(a);
        let r = ledger_check(&t.snapshot(), true);
        assert!(!r.passed && r.leaked_blocks == 1);
        drop(b);
        assert!(ledger_check(&t.snapshot(), true).passed);
    }

    #[test]
    fn resize_tracks_peak() {
        let t = MemoryTracker::new();
        let mut l = t.lease(AllocTag::Activations, 10);
        l.resize(50);
        l.resize(5);
        let s = t.snapshot();
        assert_eq!(s.bytes(AllocTag::Activations), 5);
        assert_eq!(s.peak_bytes, 50);
    }

    #[test]
    fn comm_counters_reset() {
        let c = CommLedger::new();
        c.record(CommPhase::ForwardFeatures, 8);
        c.record(CommPhase::BackwardGradients, 4);
        assert_eq!(c.counts().total_p2p(), 12);
        c.reset();
        assert_eq!(c.counts(), CommCounts::default());
    }
}
