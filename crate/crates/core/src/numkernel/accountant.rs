//! Byte accounting for every tensor allocation.
//!
//! Each thread has a current accountant; tensors remember the accountant they
//! were charged to so a release is always credited back to the same one.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::taxonomy::LayerTag;

/// Panic payload raised when an allocation would push live bytes past the
/// accountant's limit. The harness catches it the way a GPU run catches OOM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetExceeded {
    pub requested: u64,
    pub limit: u64,
}

#[derive(Debug, Default, Clone, Copy)]
struct TagUsage {
    current: u64,
    peak: u64,
}

#[derive(Debug, Default)]
struct TagState {
    usage: HashMap<LayerTag, TagUsage>,
    at_peak: HashMap<LayerTag, u64>,
}

#[derive(Debug)]
pub struct MemoryAccountant {
    current: AtomicU64,
    peak: AtomicU64,
    limit: AtomicU64,
    tags: Mutex<TagState>,
}

impl Default for MemoryAccountant {
    fn default() -> Self {
        MemoryAccountant {
            current: AtomicU64::new(0),
            peak: AtomicU64::new(0),
            limit: AtomicU64::new(u64::MAX),
            tags: Mutex::new(TagState::default()),
        }
    }
}

impl MemoryAccountant {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn current_bytes(&self) -> u64 {
        self.current.load(Ordering::SeqCst)
    }

    pub fn peak_bytes(&self) -> u64 {
        self.peak.load(Ordering::SeqCst)
    }

    /// Live-byte ceiling; allocations beyond it panic with [`BudgetExceeded`].
    pub fn set_limit(&self, limit: Option<u64>) {
        self.limit.store(limit.unwrap_or(u64::MAX), Ordering::SeqCst);
    }

    /// Starts a new measurement scope: peaks collapse to the live values.
    pub fn reset_scope(&self) {
        let mut tags = self.tags.lock().unwrap();
        self.peak
            .store(self.current.load(Ordering::SeqCst), Ordering::SeqCst);
        for usage in tags.usage.values_mut() {
            usage.peak = usage.current;
        }
        let snapshot = tags
            .usage
            .iter()
            .filter(|(_, u)| u.current > 0)
            .map(|(t, u)| (*t, u.current))
            .collect();
        tags.at_peak = snapshot;
    }

    pub fn record_alloc(&self, bytes: u64, tag: Option<LayerTag>) {
        let limit = self.limit.load(Ordering::SeqCst);
        let now = self.current.fetch_add(bytes, Ordering::SeqCst) + bytes;
        if now > limit {
            self.current.fetch_sub(bytes, Ordering::SeqCst);
            std::panic::panic_any(BudgetExceeded {
                requested: now,
                limit,
            });
        }
        let mut tags = self.tags.lock().unwrap();
        if let Some(tag) = tag {
            let usage = tags.usage.entry(tag).or_default();
            usage.current += bytes;
            usage.peak = usage.peak.max(usage.current);
        }
        let previous_peak = self.peak.fetch_max(now, Ordering::SeqCst);
        if now > previous_peak {
            let snapshot = tags
                .usage
                .iter()
                .filter(|(_, u)| u.current > 0)
                .map(|(t, u)| (*t, u.current))
                .collect();
            tags.at_peak = snapshot;
        }
    }

    pub fn record_free(&self, bytes: u64, tag: Option<LayerTag>) {
        self.current.fetch_sub(bytes, Ordering::SeqCst);
        if let Some(tag) = tag {
            let mut tags = self.tags.lock().unwrap();
            if let Some(usage) = tags.usage.get_mut(&tag) {
                usage.current = usage.current.saturating_sub(bytes);
            }
        }
    }

    /// Highest live bytes seen per tag within the current scope.
    pub fn per_tag_peak(&self) -> BTreeMap<LayerTag, u64> {
        let tags = self.tags.lock().unwrap();
        tags.usage
            .iter()
            .filter(|(_, u)| u.peak > 0)
            .map(|(t, u)| (*t, u.peak))
            .collect()
    }

    /// Live bytes per tag at the moment the overall peak was reached.
    /// Unlike [`per_tag_peak`](Self::per_tag_peak) this always sums to at most the peak.
    pub fn per_tag_at_peak(&self) -> BTreeMap<LayerTag, u64> {
        let tags = self.tags.lock().unwrap();
        tags.at_peak.iter().map(|(t, b)| (*t, *b)).collect()
    }
}

thread_local! {
    static CURRENT: RefCell<Arc<MemoryAccountant>> = RefCell::new(MemoryAccountant::new());
}

pub fn current_accountant() -> Arc<MemoryAccountant> {
    CURRENT.with(|c| c.borrow().clone())
}

/// Runs `f` with `acc` installed as this thread's accountant.
pub fn with_accountant<R>(acc: Arc<MemoryAccountant>, f: impl FnOnce() -> R) -> R {
    struct Restore(Option<Arc<MemoryAccountant>>);
    impl Drop for Restore {
        fn drop(&mut self) {
            if let Some(prev) = self.0.take() {
                CURRENT.with(|c| *c.borrow_mut() = prev);
            }
        }
    }
    let prev = CURRENT.with(|c| std::mem::replace(&mut *c.borrow_mut(), acc));
    let _restore = Restore(Some(prev));
    f()
}
