//! Instrumented accounting of transient buffer bytes.
//!
//! GPU-profiler claims about peak working set translate here into an
//! explicit byte counter: every dense intermediate a computation allocates
//! registers its size for its lifetime, and the accountant records the
//! high-water mark. This is what makes memory-reduction ratios testable
//! without a GPU.

use std::sync::atomic::{AtomicU64, Ordering};

/// Tracks current and peak bytes of live registered allocations.
#[derive(Debug, Default)]
pub struct BufferAccountant {
    current: AtomicU64,
    peak: AtomicU64,
}

impl BufferAccountant {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `bytes` of transient allocation for the guard's lifetime.
    pub fn track(&self, bytes: u64) -> AllocGuard<'_> {
        let now = self.current.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.peak.fetch_max(now, Ordering::SeqCst);
        AllocGuard {
            accountant: self,
            bytes,
        }
    }

    pub fn current_bytes(&self) -> u64 {
        self.current.load(Ordering::SeqCst)
    }

    pub fn peak_bytes(&self) -> u64 {
        self.peak.load(Ordering::SeqCst)
    }
}

/// RAII registration of one tracked allocation.
#[derive(Debug)]
pub struct AllocGuard<'a> {
    accountant: &'a BufferAccountant,
    bytes: u64,
}

impl Drop for AllocGuard<'_> {
    fn drop(&mut self) {
        self.accountant.current.fetch_sub(self.bytes, Ordering::SeqCst);
    }
}

/// Peak transient footprint of one instrumented computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryReport {
    pub peak_transient_bytes: u64,
}
