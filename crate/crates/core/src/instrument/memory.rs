//! Peak-memory scopes over the accounting allocator.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::sync::{Arc, Once};

use crate::error::{Error, Result};
use crate::numkernel::{with_accountant, BudgetExceeded, MemoryAccountant};
use crate::taxonomy::LayerTag;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PeakMemory {
    pub peak_bytes: u64,
    /// Live bytes per tag at the moment the peak was reached.
    pub at_peak: BTreeMap<LayerTag, u64>,
    /// Each tag's own high-water mark.
    pub per_tag_peak: BTreeMap<LayerTag, u64>,
}

fn snapshot(acc: &MemoryAccountant) -> PeakMemory {
    PeakMemory {
        peak_bytes: acc.peak_bytes(),
        at_peak: acc.per_tag_at_peak(),
        per_tag_peak: acc.per_tag_peak(),
    }
}

/// Runs `f` under a fresh accountant and reports the peak of live bytes
/// allocated inside it. Tensors that existed before the scope do not count.
pub fn measure_peak_memory<R>(f: impl FnOnce() -> R) -> (R, PeakMemory) {
    let acc = MemoryAccountant::new();
    let out = with_accountant(Arc::clone(&acc), f);
    (out, snapshot(&acc))
}

/// Like [`measure_peak_memory`], but allocations beyond `limit` live bytes
/// abort the computation with [`Error::BudgetExceeded`].
pub fn measure_peak_memory_limited<R>(limit: u64, f: impl FnOnce() -> R) -> Result<(R, PeakMemory)> {
    quiet_budget_panics();
    let acc = MemoryAccountant::new();
    acc.set_limit(Some(limit));
    let run = panic::catch_unwind(AssertUnwindSafe(|| with_accountant(Arc::clone(&acc), f)));
    match run {
        Ok(out) => Ok((out, snapshot(&acc))),
        Err(payload) => match payload.downcast::<BudgetExceeded>() {
            Ok(b) => Err(Error::BudgetExceeded {
                requested: b.requested,
                limit: b.limit,
            }),
            Err(other) => panic::resume_unwind(other),
        },
    }
}

/// Keeps the default panic hook from printing budget overruns, which are
/// expected control flow during batch-size search.
fn quiet_budget_panics() {
    static HOOK: Once = Once::new();
    HOOK.call_once(|| {
        let prev = panic::take_hook();
        panic::set_hook(Box::new(move |info| {
            if info.payload().downcast_ref::<BudgetExceeded>().is_none() {
                prev(info);
            }
        }));
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Tensor;

    #[test]
    fn single_allocation_peak() {
        let (_, m) = measure_peak_memory(|| drop(Tensor::zeros(&[1000, 1000])));
        assert_eq!(m.peak_bytes, 4_000_000);
    }

    #[test]
    fn sequential_allocations_do_not_stack() {
        let (_, m) = measure_peak_memory(|| {
            drop(Tensor::zeros(&[250, 100]));
            drop(Tensor::zeros(&[250, 100]));
        });
        assert_eq!(m.peak_bytes, 100_000);
    }

    #[test]
    fn reads_do_not_move_the_peak() {
        let (_, a) = measure_peak_memory(|| {
            let t = Tensor::zeros(&[100]);
            let s: f32 = t.data().iter().sum();
            let _ = t.data().iter().fold(s, |x, y| x + y);
        });
        let (_, b) = measure_peak_memory(|| drop(Tensor::zeros(&[100])));
        assert_eq!(a.peak_bytes, b.peak_bytes);
    }

    #[test]
    fn limit_turns_into_error() {
        let r = measure_peak_memory_limited(1000, || Tensor::zeros(&[1000]));
        assert!(matches!(r, Err(Error::BudgetExceeded { limit: 1000, .. })));
        let (t, m) = measure_peak_memory_limited(4000, || Tensor::zeros(&[1000])).unwrap();
        assert_eq!(t.numel(), 1000);
        assert_eq!(m.peak_bytes, 4000);
    }
}
