//! Thread-local attribution state: the active layer tag and optional
//! operation counters that kernels report their work to.
//!
//! Multiply-accumulates are charged to the active tag. Elementwise work
//! (softmax, norms, activations, residual adds) is charged to `Other` at the
//! active layer index, matching the cost model's convention.

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::taxonomy::{LayerTag, TagKind};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpTally {
    pub macs: BTreeMap<LayerTag, u64>,
    pub elementwise: BTreeMap<LayerTag, u64>,
}

impl OpTally {
    pub fn total_macs(&self) -> u64 {
        self.macs.values().sum()
    }

    pub fn total_elementwise(&self) -> u64 {
        self.elementwise.values().sum()
    }

    /// Flops under the cost-model convention: 2 per MAC, 5 per elementwise output.
    pub fn flops(&self) -> BTreeMap<LayerTag, u64> {
        let mut out: BTreeMap<LayerTag, u64> = BTreeMap::new();
        for (tag, m) in &self.macs {
            *out.entry(*tag).or_default() += 2 * m;
        }
        for (tag, e) in &self.elementwise {
            *out.entry(*tag).or_default() += 5 * e;
        }
        out
    }
}

thread_local! {
    static TAGS: RefCell<Vec<LayerTag>> = const { RefCell::new(Vec::new()) };
    static TALLY: RefCell<Option<OpTally>> = const { RefCell::new(None) };
}

pub fn current_tag() -> Option<LayerTag> {
    TAGS.with(|t| t.borrow().last().copied())
}

pub fn push_tag(tag: LayerTag) {
    TAGS.with(|t| t.borrow_mut().push(tag));
}

pub fn pop_tag() -> Option<LayerTag> {
    TAGS.with(|t| t.borrow_mut().pop())
}

/// Runs `f` with `tag` active for allocations and op counts.
pub fn with_tag<R>(tag: LayerTag, f: impl FnOnce() -> R) -> R {
    struct Pop;
    impl Drop for Pop {
        fn drop(&mut self) {
            pop_tag();
        }
    }
    push_tag(tag);
    let _pop = Pop;
    f()
}

fn untagged() -> LayerTag {
    LayerTag::other(0)
}

pub fn count_macs(n: u64) {
    if n == 0 {
        return;
    }
    TALLY.with(|t| {
        if let Some(tally) = t.borrow_mut().as_mut() {
            let tag = current_tag().unwrap_or_else(untagged);
            *tally.macs.entry(tag).or_default() += n;
        }
    });
}

pub fn count_elementwise(n: u64) {
    if n == 0 {
        return;
    }
    TALLY.with(|t| {
        if let Some(tally) = t.borrow_mut().as_mut() {
            let layer = current_tag().map(|t| t.layer_index).unwrap_or(0);
            *tally
                .elementwise
                .entry(LayerTag::new(TagKind::Other, layer))
                .or_default() += n;
        }
    });
}

/// Counts every kernel invocation made by `f` on this thread.
pub fn tally_ops<R>(f: impl FnOnce() -> R) -> (R, OpTally) {
    let prev = TALLY.with(|t| t.borrow_mut().replace(OpTally::default()));
    let out = f();
    let tally = TALLY.with(|t| std::mem::replace(&mut *t.borrow_mut(), prev));
    (out, tally.unwrap_or_default())
}

/// Runs `f` with counting switched off, restoring any active tally afterwards.
pub fn suspend_tally<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(Option<OpTally>);
    impl Drop for Restore {
        fn drop(&mut self) {
            let prev = self.0.take();
            TALLY.with(|t| *t.borrow_mut() = prev);
        }
    }
    let _restore = Restore(TALLY.with(|t| t.borrow_mut().take()));
    f()
}
