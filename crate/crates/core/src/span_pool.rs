//! Global pool of free spans.
//!
//! One lock-free stack per (real-span size, pool) pair. A thread pushes to
//! and pops from the pool picked by its ordinal, and only falls back to
//! scanning the others, then the arena, when its own stack is empty.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use crossbeam_utils::CachePadded;

use crate::arena::Arena;
use crate::error::AllocError;
use crate::size_classes::{NUM_REAL_SPAN_SIZES, REAL_SPAN_SIZES};
use crate::span::{SpanRef, State};
use crate::vmem::{VirtualMemory, PAGE_SIZE};

const ADDR_BITS: u32 = 48;
const ADDR_MASK: u64 = (1 << ADDR_BITS) - 1;

#[inline]
fn pack(addr: usize, tag: u16) -> u64 {
    debug_assert!(addr as u64 <= ADDR_MASK);
    ((tag as u64) << ADDR_BITS) | addr as u64
}

#[inline]
fn unpack(word: u64) -> (usize, u16) {
    ((word & ADDR_MASK) as usize, (word >> ADDR_BITS) as u16)
}

/// A top-of-stack observation, kept so a pop can be completed later.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TopSnapshot {
    word: u64,
    next: usize,
}

impl TopSnapshot {
    pub fn span(&self) -> Option<SpanRef> {
        match unpack(self.word).0 {
            0 => None,
            // SAFETY: only span bases are ever pushed.
            addr => Some(unsafe { SpanRef::from_base(addr) }),
        }
    }

    pub fn tag(&self) -> u16 {
        unpack(self.word).1
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StackCounters {
    pub pushes: u64,
    pub pops: u64,
    pub retries: u64,
}

/// Treiber stack of spans linked through their headers, with a 16-bit tag
/// in the top word that changes on every successful update.
#[derive(Debug, Default)]
pub struct TaggedStack {
    top: CachePadded<AtomicU64>,
    pushes: AtomicU64,
    pops: AtomicU64,
    retries: AtomicU64,
}

impl TaggedStack {
    pub fn new() -> TaggedStack {
        TaggedStack::default()
    }

    /// # Safety
    /// The span must not be on any other list, and its header must stay
    /// mapped for as long as the stack is in use.
    pub unsafe fn push(&self, span: SpanRef) {
        let link = &span.header().link;
        let mut cur = self.top.load(Ordering::Relaxed);
        loop {
            let (head, tag) = unpack(cur);
            link.store(head as u64, Ordering::Relaxed);
            match self.top.compare_exchange_weak(
                cur,
                pack(span.base(), tag.wrapping_add(1)),
                Ordering::Release,
                Ordering::Relaxed,
            ) {
                Ok(_) => break,
                Err(now) => {
                    self.retries.fetch_add(1, Ordering::Relaxed);
                    cur = now;
                }
            }
        }
        self.pushes.fetch_add(1, Ordering::Relaxed);
    }

    pub fn pop(&self) -> Option<SpanRef> {
        loop {
            let snap = self.load_top();
            snap.span()?;
            match self.try_pop_at(snap) {
                Ok(span) => return Some(span),
                Err(_) => {
                    self.retries.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
    }

    /// Reads the top and the link of the top element.
    pub fn load_top(&self) -> TopSnapshot {
        let word = self.top.load(Ordering::Acquire);
        let next = match self.snapshot_head(word) {
            // Headers are never unmapped while spans circulate, so reading a
            // link of a span that has since been popped elsewhere is harmless;
            // the tag check below rejects the stale value.
            Some(span) => span.header().link.load(Ordering::Relaxed) as usize,
            None => 0,
        };
        TopSnapshot { word, next }
    }

    fn snapshot_head(&self, word: u64) -> Option<SpanRef> {
        TopSnapshot { word, next: 0 }.span()
    }

    /// Completes a pop observed earlier. Fails if the top word changed in
    /// between, including when the same span is back on top.
    pub fn try_pop_at(&self, snap: TopSnapshot) -> Result<SpanRef, TopSnapshot> {
        let span = match snap.span() {
            Some(s) => s,
            None => return Err(snap),
        };
        let next = pack(snap.next, snap.tag().wrapping_add(1));
        match self
            .top
            .compare_exchange(snap.word, next, Ordering::AcqRel, Ordering::Acquire)
        {
            Ok(_) => {
                self.pops.fetch_add(1, Ordering::Relaxed);
                Ok(span)
            }
            Err(_) => Err(self.load_top()),
        }
    }

    pub fn is_empty(&self) -> bool {
        unpack(self.top.load(Ordering::Acquire)).0 == 0
    }

    /// Pushes minus pops; exact only when no operation is in flight.
    pub fn len(&self) -> usize {
        let pushes = self.pushes.load(Ordering::Relaxed);
        let pops = self.pops.load(Ordering::Relaxed);
        pushes.saturating_sub(pops) as usize
    }

    pub fn counters(&self) -> StackCounters {
        StackCounters {
            pushes: self.pushes.load(Ordering::Relaxed),
            pops: self.pops.load(Ordering::Relaxed),
            retries: self.retries.load(Ordering::Relaxed),
        }
    }

    /// Members from top to bottom.
    ///
    /// # Safety
    /// No push or pop may run concurrently.
    pub unsafe fn members(&self) -> Vec<SpanRef> {
        let mut out = Vec::new();
        let mut cur = unpack(self.top.load(Ordering::Acquire)).0;
        while cur != 0 {
            let span = SpanRef::from_base(cur);
            out.push(span);
            cur = span.header().link.load(Ordering::Relaxed) as usize;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolStackStats {
    pub real_span_size: usize,
    pub pool: usize,
    pub len: usize,
    pub counters: StackCounters,
}

#[derive(Debug)]
pub struct SpanPool {
    stacks: Box<[TaggedStack]>,
    width: usize,
    arena: Arena,
    vm: Arc<dyn VirtualMemory>,
    decommit: bool,
    decommit_threshold: usize,
    decommitted_bytes: AtomicUsize,
}

impl SpanPool {
    pub fn new(
        arena: Arena,
        vm: Arc<dyn VirtualMemory>,
        width: usize,
        decommit: bool,
        decommit_threshold: usize,
    ) -> SpanPool {
        let width = width.max(1);
        SpanPool {
            stacks: (0..NUM_REAL_SPAN_SIZES * width).map(|_| TaggedStack::new()).collect(),
            width,
            arena,
            vm,
            decommit,
            decommit_threshold,
            decommitted_bytes: AtomicUsize::new(0),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn arena(&self) -> &Arena {
        &self.arena
    }

    fn stack(&self, rs_index: usize, pool: usize) -> &TaggedStack {
        &self.stacks[rs_index * self.width + pool]
    }

    /// Returns a free span to the pool, decommitting everything past the
    /// first page when its real span is larger than the threshold.
    ///
    /// # Safety
    /// The caller must have moved the span to the free state and hold the
    /// only reference to it.
    pub unsafe fn put(&self, span: SpanRef, ordinal: usize) {
        debug_assert!(span.epoch().is(State::Free), "pooling {:?}", span.epoch());
        let g = span.geometry();
        if self.decommit && g.real_span_size > self.decommit_threshold {
            let len = g.real_span_size - PAGE_SIZE;
            self.vm.decommit(span.base() + PAGE_SIZE, len);
            self.decommitted_bytes.fetch_add(len, Ordering::Relaxed);
        }
        self.stack(g.real_span_index, ordinal % self.width).push(span);
    }

    /// A span whose real-span size is at least `REAL_SPAN_SIZES[rs_index]`,
    /// either free from a stack or fresh from the arena.
    pub fn get(&self, rs_index: usize, ordinal: usize) -> Result<SpanRef, AllocError> {
        let own = ordinal % self.width;
        if let Some(s) = self.stack(rs_index, own).pop() {
            return Ok(s);
        }
        for rs in rs_index..NUM_REAL_SPAN_SIZES {
            for pool in 0..self.width {
                if rs == rs_index && pool == own {
                    continue;
                }
                if let Some(s) = self.stack(rs, pool).pop() {
                    return Ok(s);
                }
            }
        }
        let base = self.arena.acquire_virtual_span()?;
        // SAFETY: the base is a fresh virtual span inside the arena.
        Ok(unsafe { SpanRef::from_base(base) })
    }

    /// Spans currently pooled.
    pub fn len(&self) -> usize {
        self.stacks.iter().map(TaggedStack::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// # Safety
    /// The pool must be quiescent.
    pub unsafe fn contains(&self, span: SpanRef) -> bool {
        self.stacks.iter().any(|s| s.members().contains(&span))
    }

    /// # Safety
    /// The pool must be quiescent.
    pub unsafe fn members(&self) -> Vec<SpanRef> {
        self.stacks.iter().flat_map(|s| s.members()).collect()
    }

    pub fn decommitted_bytes(&self) -> usize {
        self.decommitted_bytes.load(Ordering::Relaxed)
    }

    pub fn stats(&self) -> Vec<PoolStackStats> {
        let mut out = Vec::with_capacity(self.stacks.len());
        for (rs, &size) in REAL_SPAN_SIZES.iter().enumerate() {
            for pool in 0..self.width {
                let s = self.stack(rs, pool);
                out.push(PoolStackStats {
                    real_span_size: size,
                    pool,
                    len: s.len(),
                    counters: s.counters(),
                });
            }
        }
        out
    }
}
