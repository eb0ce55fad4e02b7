use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Mutex;

use spanalloc::vmem::VIRTUAL_SPAN_SIZE;
use spanalloc::{Allocator, State};

/// Hooks a workload calls around every allocator operation.
pub trait Observer: Sync {
    fn on_alloc(&self, _alloc: &Allocator, _ptr: usize, _size: usize) {}

    fn on_free(&self, _alloc: &Allocator, _ptr: usize) {}

    /// Called while every worker is parked with its objects still live.
    fn at_quiescence(&self, _alloc: &Allocator, _epoch: usize) {}
}

pub struct NoObserver;

impl Observer for NoObserver {}

/// Tracks live blocks as address intervals and reports any overlap, double
/// free, or per-span block-count mismatch.
#[derive(Debug, Default)]
pub struct IntervalChecker {
    inner: Mutex<CheckerState>,
}

#[derive(Debug, Default)]
struct CheckerState {
    live: BTreeMap<usize, usize>,
    violations: Vec<String>,
    quiescent_checks: usize,
}

impl IntervalChecker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn violations(&self) -> Vec<String> {
        self.inner.lock().unwrap().violations.clone()
    }

    pub fn live_count(&self) -> usize {
        self.inner.lock().unwrap().live.len()
    }

    pub fn quiescent_checks(&self) -> usize {
        self.inner.lock().unwrap().quiescent_checks
    }

    /// Compares every in-use span's free lists with the live set.
    ///
    /// Only meaningful when no thread is inside the allocator.
    pub fn check_conservation(&self, alloc: &Allocator) {
        let mut st = self.inner.lock().unwrap();
        st.quiescent_checks += 1;
        let mut per_span: HashMap<usize, usize> = HashMap::new();
        for &a in st.live.keys() {
            if alloc.arena().contains(a) {
                *per_span.entry(a & !(VIRTUAL_SPAN_SIZE - 1)).or_default() += 1;
            }
        }
        let mut problems = Vec::new();
        // SAFETY: the caller guarantees quiescence.
        for s in unsafe { alloc.spans() } {
            let live_n = per_span.remove(&s.base).unwrap_or(0);
            if matches!(s.state, None | Some(State::Free)) {
                if live_n > 0 {
                    problems.push(format!("{live_n} live blocks in free span {:#x}", s.base));
                }
                continue;
            }
            if s.free_blocks() + live_n != s.blocks_per_span {
                problems.push(format!(
                    "span {:#x}: {} free + {live_n} live != {}",
                    s.base,
                    s.free_blocks(),
                    s.blocks_per_span
                ));
            }
            let mut seen = HashSet::new();
            for b in s.local_free.iter().chain(&s.remote_free) {
                if !seen.insert(*b) || st.live.contains_key(b) {
                    problems.push(format!("block {b:#x} both free and live, or listed twice"));
                }
            }
        }
        for (base, n) in per_span {
            problems.push(format!("{n} live blocks in span {base:#x} the arena never handed out"));
        }
        st.violations.extend(problems);
    }
}

impl Observer for IntervalChecker {
    fn on_alloc(&self, alloc: &Allocator, ptr: usize, size: usize) {
        // SAFETY: `ptr` was just returned by `alloc` and is live.
        let len = unsafe { alloc.usable_size(ptr as *mut u8) }.max(size);
        let mut st = self.inner.lock().unwrap();
        if let Some((&prev, &plen)) = st.live.range(..=ptr).next_back() {
            if prev + plen > ptr {
                st.violations.push(format!("{ptr:#x} overlaps live {prev:#x}+{plen}"));
            }
        }
        if let Some((&next, _)) = st.live.range(ptr + 1..).next() {
            if ptr + len > next {
                st.violations.push(format!("{ptr:#x}+{len} overlaps live {next:#x}"));
            }
        }
        st.live.insert(ptr, len);
    }

    fn on_free(&self, _alloc: &Allocator, ptr: usize) {
        let mut st = self.inner.lock().unwrap();
        if st.live.remove(&ptr).is_none() {
            st.violations.push(format!("free of non-live {ptr:#x}"));
        }
    }

    fn at_quiescence(&self, alloc: &Allocator, _epoch: usize) {
        self.check_conservation(alloc);
    }
}

fn arena_offset(alloc: &Allocator, ptr: usize) -> usize {
    if alloc.arena().contains(ptr) {
        ptr - alloc.arena().region().base
    } else {
        usize::MAX
    }
}

/// Records the single-thread operation sequence as (is_alloc, size, offset
/// from the arena base). Huge objects get offset `usize::MAX`.
#[derive(Debug, Default)]
pub struct OpLog {
    ops: Mutex<Vec<(bool, usize, usize)>>,
}

impl OpLog {
    pub fn ops(&self) -> Vec<(bool, usize, usize)> {
        self.ops.lock().unwrap().clone()
    }
}

impl Observer for OpLog {
    fn on_alloc(&self, alloc: &Allocator, ptr: usize, size: usize) {
        self.ops.lock().unwrap().push((true, size, arena_offset(alloc, ptr)));
    }

    fn on_free(&self, alloc: &Allocator, ptr: usize) {
        self.ops.lock().unwrap().push((false, 0, arena_offset(alloc, ptr)));
    }
}
