//! Hierarchical region timing with an injectable clock.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::numkernel::tally::with_tag;
use crate::taxonomy::LayerTag;

pub trait Clock: Send + Sync {
    fn now_ns(&self) -> u64;
}

#[derive(Debug, Clone, Copy)]
pub struct MonotonicClock {
    origin: Instant,
}

impl Default for MonotonicClock {
    fn default() -> Self {
        MonotonicClock {
            origin: Instant::now(),
        }
    }
}

impl Clock for MonotonicClock {
    fn now_ns(&self) -> u64 {
        self.origin.elapsed().as_nanos() as u64
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct FakeClock {
    now: AtomicU64,
}

impl FakeClock {
    pub fn new() -> Arc<FakeClock> {
        Arc::new(FakeClock::default())
    }

    pub fn advance(&self, ns: u64) {
        self.now.fetch_add(ns, Ordering::SeqCst);
    }

    pub fn advance_ms(&self, ms: f64) {
        self.advance((ms * 1e6).round() as u64);
    }
}

impl Clock for FakeClock {
    fn now_ns(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone)]
pub struct TimerNode {
    pub tag: LayerTag,
    pub start: u64,
    pub stop: Option<u64>,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

impl TimerNode {
    pub fn elapsed(&self) -> u64 {
        self.stop.map_or(0, |s| s - self.start)
    }
}

/// Regions form a tree under an untagged root. Time inside a region that no
/// child region covers is that region's exclusive time; the root's exclusive
/// time is reported as `Other`.
pub struct TimerTree {
    clock: Arc<dyn Clock>,
    nodes: Vec<TimerNode>,
    stack: Vec<usize>,
}

pub const ROOT: usize = 0;

impl TimerTree {
    pub fn new(clock: Arc<dyn Clock>) -> TimerTree {
        let start = clock.now_ns();
        TimerTree {
            clock,
            nodes: vec![TimerNode {
                tag: LayerTag::other(0),
                start,
                stop: None,
                parent: None,
                children: Vec::new(),
            }],
            stack: vec![ROOT],
        }
    }

    pub fn open(&mut self, tag: LayerTag) -> Result<usize> {
        let parent = *self
            .stack
            .last()
            .ok_or_else(|| Error::Instrumentation("open after the root was closed".into()))?;
        let id = self.nodes.len();
        self.nodes.push(TimerNode {
            tag,
            start: self.clock.now_ns(),
            stop: None,
            parent: Some(parent),
            children: Vec::new(),
        });
        self.nodes[parent].children.push(id);
        self.stack.push(id);
        Ok(id)
    }

    /// Closes region `id`, which must be the innermost open region.
    pub fn close(&mut self, id: usize) -> Result<u64> {
        match self.stack.last() {
            Some(&top) if top == id => {
                self.stack.pop();
                let now = self.clock.now_ns();
                self.nodes[id].stop = Some(now);
                Ok(self.nodes[id].elapsed())
            }
            Some(&top) => Err(Error::Instrumentation(format!(
                "region {id} closed while region {top} ({}) is still open",
                self.nodes[top].tag
            ))),
            None => Err(Error::Instrumentation(format!("region {id} closed twice"))),
        }
    }

    /// Closes the root; every region must already be closed.
    pub fn finish(&mut self) -> Result<u64> {
        if self.stack.len() != 1 {
            return Err(Error::Instrumentation(format!(
                "{} region(s) left open",
                self.stack.len().saturating_sub(1)
            )));
        }
        self.close(ROOT)
    }

    pub fn nodes(&self) -> &[TimerNode] {
        &self.nodes
    }

    pub fn root_elapsed(&self) -> u64 {
        self.nodes[ROOT].elapsed()
    }

    fn exclusive(&self, id: usize) -> u64 {
        let n = &self.nodes[id];
        let inner: u64 = n.children.iter().map(|&c| self.nodes[c].elapsed()).sum();
        n.elapsed().saturating_sub(inner)
    }

    /// Exclusive nanoseconds per tag; sums to the root elapsed time.
    pub fn by_tag(&self) -> BTreeMap<LayerTag, u64> {
        let mut out = BTreeMap::new();
        for id in 0..self.nodes.len() {
            *out.entry(self.nodes[id].tag).or_default() += self.exclusive(id);
        }
        out
    }

    pub fn residual(&self) -> u64 {
        self.exclusive(ROOT)
    }
}

thread_local! {
    static ACTIVE: RefCell<Option<TimerTree>> = const { RefCell::new(None) };
}

/// Runs `f` with a fresh timer tree active on this thread and returns the tree.
pub fn with_timer<R>(clock: Arc<dyn Clock>, f: impl FnOnce() -> R) -> Result<(R, TimerTree)> {
    struct Restore(Option<TimerTree>);
    impl Drop for Restore {
        fn drop(&mut self) {
            let prev = self.0.take();
            ACTIVE.with(|a| *a.borrow_mut() = prev);
        }
    }
    let prev = ACTIVE.with(|a| a.borrow_mut().replace(TimerTree::new(clock)));
    let restore = Restore(prev);
    let out = f();
    let mut tree = ACTIVE
        .with(|a| a.borrow_mut().take())
        .ok_or_else(|| Error::Instrumentation("timer tree removed while active".into()))?;
    drop(restore);
    tree.finish()?;
    Ok((out, tree))
}

/// Runs `f` under `tag`: allocations and op counts are attributed to it and,
/// when a timer tree is active, its elapsed time is recorded.
pub fn region<R>(tag: LayerTag, f: impl FnOnce() -> R) -> R {
    struct Close(Option<usize>);
    impl Drop for Close {
        fn drop(&mut self) {
            if let Some(id) = self.0 {
                ACTIVE.with(|a| {
                    if let Some(t) = a.borrow_mut().as_mut() {
                        // a guard always closes the innermost region it opened
                        let _ = t.close(id);
                    }
                });
            }
        }
    }
    with_tag(tag, || {
        let id = ACTIVE.with(|a| a.borrow_mut().as_mut().and_then(|t| t.open(tag).ok()));
        let _close = Close(id);
        f()
    })
}

/// Mean cost of an empty region on `clock`, in nanoseconds.
pub fn calibrate_overhead(clock: Arc<dyn Clock>, iters: u32) -> u64 {
    let iters = iters.max(1);
    let Ok((_, tree)) = with_timer(clock, || {
        for _ in 0..iters {
            region(LayerTag::other(0), || ());
        }
    }) else {
        return 0;
    };
    tree.root_elapsed() / iters as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fake_clock_region_records_exact_time() {
        let clock = FakeClock::new();
        let c = clock.clone();
        let (_, tree) = with_timer(clock, || {
            region(LayerTag::attention(0), || c.advance_ms(5.0));
        })
        .unwrap();
        assert_eq!(tree.by_tag()[&LayerTag::attention(0)], 5_000_000);
    }

    #[test]
    fn residual_lands_on_other() {
        let clock = FakeClock::new();
        let c = clock.clone();
        let (_, tree) = with_timer(clock, || {
            c.advance_ms(1.0);
            region(LayerTag::intermediate(3), || c.advance_ms(2.0));
            c.advance_ms(2.0);
        })
        .unwrap();
        assert_eq!(tree.root_elapsed(), 5_000_000);
        assert_eq!(tree.residual(), 3_000_000);
        let by = tree.by_tag();
        assert_eq!(by[&LayerTag::other(0)], 3_000_000);
        assert_eq!(by.values().sum::<u64>(), tree.root_elapsed());
    }

    #[test]
    fn unbalanced_close_is_an_error() {
        let mut t = TimerTree::new(FakeClock::new());
        let a = t.open(LayerTag::attention(0)).unwrap();
        let _b = t.open(LayerTag::output(0)).unwrap();
        assert!(matches!(t.close(a), Err(Error::Instrumentation(_))));
        assert!(t.finish().is_err());
    }

    #[test]
    fn empty_region_on_fake_clock_is_zero() {
        assert_eq!(calibrate_overhead(FakeClock::new(), 10), 0);
    }
}
