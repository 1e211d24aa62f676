//! Exact inference accounting.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

/// Counters are atomic so queries can run in parallel; phase timings are
/// accumulated under a lock.
#[derive(Debug, Default)]
pub struct CostLedger {
    embed_calls: AtomicU64,
    pair_classifications: AtomicU64,
    similarity_ops: AtomicU64,
    phases: Mutex<BTreeMap<String, Duration>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerCounts {
    pub embed_calls: u64,
    pub pair_classifications: u64,
    pub similarity_ops: u64,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_embed_calls(&self, n: u64) {
        self.embed_calls.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_pair_classifications(&self, n: u64) {
        self.pair_classifications.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_similarity_ops(&self, n: u64) {
        self.similarity_ops.fetch_add(n, Ordering::Relaxed);
    }

    pub fn counts(&self) -> LedgerCounts {
        LedgerCounts {
            embed_calls: self.embed_calls.load(Ordering::Relaxed),
            pair_classifications: self.pair_classifications.load(Ordering::Relaxed),
            similarity_ops: self.similarity_ops.load(Ordering::Relaxed),
        }
    }

    pub fn record_phase(&self, phase: &str, elapsed: Duration) {
        let mut phases = self.phases.lock().expect("ledger lock poisoned");
        *phases.entry(phase.to_string()).or_default() += elapsed;
    }

    /// Runs `f`, charging its wall-clock time to `phase`.
    pub fn time<T>(&self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.record_phase(phase, start.elapsed());
        out
    }

    /// Phase timings in milliseconds.
    pub fn phase_ms(&self) -> BTreeMap<String, f64> {
        self.phases
            .lock()
            .expect("ledger lock poisoned")
            .iter()
            .map(|(k, v)| (k.clone(), v.as_secs_f64() * 1e3))
            .collect()
    }
}
