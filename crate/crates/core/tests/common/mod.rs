#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use spanalloc::{Allocator, Config, SimVm, SizeClass, State};

pub const ARENA: usize = 1 << 30;

pub fn sim(tweak: impl FnOnce(&mut Config)) -> (Allocator, Arc<SimVm>) {
    let mut c = Config::sim();
    c.arena_bytes = ARENA;
    c.pool_width = 4;
    tweak(&mut c);
    let vm = Arc::new(SimVm::default());
    let a = Allocator::with_provider(c, vm.clone()).unwrap();
    (a, vm)
}

pub fn class(size: usize) -> SizeClass {
    match spanalloc::class_for_size(size) {
        spanalloc::SizeRoute::Class(c) => c,
        spanalloc::SizeRoute::Huge => panic!("huge"),
    }
}

pub fn span_of(p: *mut u8) -> usize {
    p as usize & !((2 << 20) - 1)
}

/// Live blocks as tracked by the test, independent of allocator state.
#[derive(Default)]
pub struct Live {
    /// address -> block size
    pub blocks: BTreeMap<usize, usize>,
}

impl Live {
    pub fn insert(&mut self, p: *mut u8, block_size: usize) {
        let a = p as usize;
        if let Some((&prev, &len)) = self.blocks.range(..=a).next_back() {
            assert!(prev + len <= a, "{a:#x} overlaps live block {prev:#x}+{len}");
        }
        if let Some((&next, _)) = self.blocks.range(a..).next() {
            assert!(a + block_size <= next, "{a:#x}+{block_size} overlaps live block {next:#x}");
        }
        self.blocks.insert(a, block_size);
    }

    pub fn remove(&mut self, p: *mut u8) -> usize {
        self.blocks.remove(&(p as usize)).expect("freeing a block that is not live")
    }

    pub fn per_span(&self) -> HashMap<usize, (usize, usize)> {
        let mut out: HashMap<usize, (usize, usize)> = HashMap::new();
        for (&a, &len) in &self.blocks {
            let e = out.entry(a & !((2 << 20) - 1)).or_default();
            e.0 += 1;
            e.1 += len;
        }
        out
    }
}

/// Free payload bytes over every span not in the free state, with live
/// bytes taken from the test's own bookkeeping.
pub fn frag_oracle(a: &Allocator, live: &Live) -> i64 {
    let per_span = live.per_span();
    let spans = unsafe { a.spans() };
    let mut f = 0i64;
    for s in spans {
        let live_bytes = per_span.get(&s.base).map_or(0, |x| x.1);
        match s.state {
            None | Some(State::Free) => assert_eq!(live_bytes, 0, "live block in free span"),
            Some(_) => {
                let g = s.class.geometry();
                f += g.payload_bytes() as i64 - live_bytes as i64;
            }
        }
    }
    f
}

/// Every span's blocks add up, and the test's live count agrees with it.
pub fn check_conservation(a: &Allocator, live: &Live) {
    let per_span = live.per_span();
    for s in unsafe { a.spans() } {
        if matches!(s.state, None | Some(State::Free)) {
            continue;
        }
        assert_eq!(s.remote_count, s.remote_free.len(), "remote count vs list at {:#x}", s.base);
        let live_n = per_span.get(&s.base).map_or(0, |x| x.0);
        assert_eq!(
            s.free_blocks() + live_n,
            s.blocks_per_span,
            "conservation at span {:#x} ({:?})",
            s.base,
            s.state
        );
        let mut seen = std::collections::HashSet::new();
        for b in s.local_free.iter().chain(&s.remote_free) {
            assert!(seen.insert(*b), "block {b:#x} listed twice");
            assert!(!live.blocks.contains_key(b), "live block {b:#x} on a free list");
        }
    }
}
