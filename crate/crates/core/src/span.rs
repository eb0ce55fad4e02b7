//! Real-span headers and the per-span state machine.
//!
//! A real span starts at a 2MB-aligned virtual span base. The header sits in
//! the first bytes of the span, followed by the payload: a fixed number of
//! equally sized blocks. Blocks carry no metadata while live; a free block
//! stores the address of the next free block in its first word.
//!
//! Span states are kept in the `epoch` word: four one-hot state bits at the
//! top and a 60-bit counter below that is bumped on every successful
//! transition, so a stale observation can never win a compare-and-swap.
//!
//! ```text
//!  expected --init--> free --> hot --> floating --> reusable --> free
//!                               ^          |  ^          |
//!                               |          |  +----------+ (terminate)
//!                               |          +--> free
//!                               +------------------------+ (reuse)
//! ```

use std::fmt;
use std::ptr::NonNull;
use std::sync::atomic::{AtomicU32, AtomicU64, AtomicUsize, Ordering};

use crate::size_classes::{Geometry, SizeClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum State {
    Free,
    Hot,
    Floating,
    Reusable,
}

impl State {
    const fn bit(self) -> u64 {
        match self {
            State::Free => 1 << 60,
            State::Hot => 1 << 61,
            State::Floating => 1 << 62,
            State::Reusable => 1 << 63,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            State::Free => "free",
            State::Hot => "hot",
            State::Floating => "floating",
            State::Reusable => "reusable",
        }
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Edges of the span life cycle that a transition may take.
pub fn is_legal_edge(from: State, to: State) -> bool {
    use State::*;
    matches!(
        (from, to),
        (Free, Hot)
            | (Hot, Floating)
            | (Floating, Reusable)
            | (Reusable, Hot)
            | (Reusable, Free)
            | (Floating, Free)
            | (Reusable, Floating)
    )
}

const STATE_MASK: u64 = 0xF << 60;
const COUNTER_MASK: u64 = !STATE_MASK;

/// State bits plus ABA counter.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Epoch(u64);

impl Epoch {
    /// Untouched arena memory: no state bits, counter zero.
    pub const EXPECTED: Epoch = Epoch(0);

    pub fn new(state: State, counter: u64) -> Epoch {
        Epoch(state.bit() | (counter & COUNTER_MASK))
    }

    pub fn from_raw(raw: u64) -> Epoch {
        Epoch(raw)
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    /// `None` for spans still in the expected (never initialised) state.
    pub fn state(self) -> Option<State> {
        match self.0 & STATE_MASK {
            0 => None,
            b if b == State::Free.bit() => Some(State::Free),
            b if b == State::Hot.bit() => Some(State::Hot),
            b if b == State::Floating.bit() => Some(State::Floating),
            b if b == State::Reusable.bit() => Some(State::Reusable),
            b => panic!("corrupt epoch state bits {b:#x}"),
        }
    }

    pub fn is(self, state: State) -> bool {
        self.0 & STATE_MASK == state.bit()
    }

    pub fn counter(self) -> u64 {
        self.0 & COUNTER_MASK
    }

    fn successor(self, target: State) -> Epoch {
        Epoch::new(target, self.counter().wrapping_add(1))
    }
}

impl fmt::Debug for Epoch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.state() {
            Some(s) => write!(f, "Epoch({s}, {})", self.counter()),
            None => write!(f, "Epoch(expected, {})", self.counter()),
        }
    }
}

const LAB_MASK: u64 = (1 << 48) - 1;

/// Owning LAB identity: 16-bit generation over a 48-bit LAB table index.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Owner(u64);

impl Owner {
    pub const NONE: Owner = Owner(0);
    pub const TERMINATED: Owner = Owner(u64::MAX);

    pub fn new(generation: u16, lab_index: usize) -> Owner {
        debug_assert!((lab_index as u64) < LAB_MASK);
        Owner(((generation as u64) << 48) | lab_index as u64)
    }

    pub fn from_raw(raw: u64) -> Owner {
        Owner(raw)
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn generation(self) -> u16 {
        (self.0 >> 48) as u16
    }

    pub fn lab_index(self) -> usize {
        (self.0 & LAB_MASK) as usize
    }

    /// True for owners that name a LAB (not `NONE` or `TERMINATED`).
    pub fn is_live_value(self) -> bool {
        self != Owner::NONE && self != Owner::TERMINATED
    }
}

impl fmt::Debug for Owner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Owner::NONE => f.write_str("Owner(none)"),
            Owner::TERMINATED => f.write_str("Owner(terminated)"),
            o => write!(f, "Owner(lab {}, gen {})", o.lab_index(), o.generation()),
        }
    }
}

const REMOTE_HEAD_MASK: u64 = (1 << 48) - 1;

#[inline]
fn remote_pack(count: u64, head_offset: u64) -> u64 {
    (count << 48) | head_offset
}

#[inline]
fn remote_count(word: u64) -> usize {
    (word >> 48) as usize
}

#[inline]
fn remote_head_offset(word: u64) -> usize {
    (word & REMOTE_HEAD_MASK) as usize
}

#[repr(C, align(64))]
struct RemoteLine {
    /// Count of queued blocks in the top 16 bits; span-relative offset of
    /// the first block in the low 48 (zero when empty, as offset zero is
    /// always the header).
    word: AtomicU64,
}

#[repr(C, align(64))]
pub struct SpanHeader {
    /// Next element when the span sits in a span-pool stack or a reusable
    /// set.
    pub(crate) link: AtomicU64,
    pub(crate) set_prev: AtomicU64,
    /// Identifier of the reusable set holding this span, zero if none.
    pub(crate) set_id: AtomicU64,
    epoch: AtomicU64,
    owner: AtomicU64,
    local_head: AtomicUsize,
    size_class: AtomicU32,
    /// Index of the next never-used block.
    bump: AtomicU32,
    local_count: AtomicU32,
    remote: RemoteLine,
}

const _: () = assert!(std::mem::size_of::<SpanHeader>() <= crate::size_classes::SMALL_HEADER_SIZE);

/// Handle to a span header inside the arena.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct SpanRef(NonNull<SpanHeader>);

// SAFETY: all shared header state is atomic; owner-only fields are only
// written by the owning thread.
unsafe impl Send for SpanRef {}
unsafe impl Sync for SpanRef {}

impl fmt::Debug for SpanRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SpanRef({:#x})", self.base())
    }
}

impl SpanRef {
    /// # Safety
    /// `base` must be a virtual span base inside a live arena, so that the
    /// header is mapped for as long as the handle is used.
    pub unsafe fn from_base(base: usize) -> SpanRef {
        debug_assert!(base != 0 && base % crate::vmem::VIRTUAL_SPAN_SIZE == 0);
        SpanRef(NonNull::new_unchecked(base as *mut SpanHeader))
    }

    #[inline]
    pub fn base(self) -> usize {
        self.0.as_ptr() as usize
    }

    #[inline]
    pub(crate) fn header<'a>(self) -> &'a SpanHeader {
        // SAFETY: from_base guarantees the header stays mapped; every field
        // is an atomic, and zeroed memory is a valid header.
        unsafe { self.0.as_ref() }
    }

    #[inline]
    pub fn size_class(self) -> SizeClass {
        SizeClass::new(self.header().size_class.load(Ordering::Relaxed) as usize)
            .expect("corrupt size class")
    }

    #[inline]
    pub fn geometry(self) -> &'static Geometry {
        self.size_class().geometry()
    }

    #[inline]
    pub fn payload_start(self) -> usize {
        self.base() + self.geometry().header_size
    }

    #[inline]
    pub fn epoch(self) -> Epoch {
        Epoch(self.header().epoch.load(Ordering::SeqCst))
    }

    #[inline]
    pub fn owner(self) -> Owner {
        Owner(self.header().owner.load(Ordering::SeqCst))
    }

    /// Rewrites the header for `class`. Pages past the header are left
    /// alone; the local list starts empty and blocks are handed out by bump.
    ///
    /// The caller must hold the only reference to a span in state free or
    /// expected.
    pub fn init_for_class(self, class: SizeClass, owner: Owner) {
        let h = self.header();
        let e = self.epoch();
        debug_assert!(
            e == Epoch::EXPECTED || e.is(State::Free),
            "init of a span in use: {e:?}"
        );
        h.link.store(0, Ordering::Relaxed);
        h.set_prev.store(0, Ordering::Relaxed);
        h.set_id.store(0, Ordering::Relaxed);
        h.size_class.store(class.index() as u32, Ordering::Relaxed);
        h.bump.store(0, Ordering::Relaxed);
        h.local_head.store(0, Ordering::Relaxed);
        h.local_count.store(0, Ordering::Relaxed);
        h.remote.word.store(0, Ordering::Relaxed);
        h.owner.store(owner.0, Ordering::SeqCst);
        if e == Epoch::EXPECTED {
            h.epoch.store(Epoch::new(State::Free, 0).0, Ordering::SeqCst);
        }
    }

    /// Pops the local list, else bumps. Owner only.
    #[inline]
    pub fn alloc_block(self) -> Option<usize> {
        let h = self.header();
        let head = h.local_head.load(Ordering::Relaxed);
        if head != 0 {
            // SAFETY: list members are free blocks of this span; their first
            // word holds the next member.
            let next = unsafe { (head as *const usize).read() };
            h.local_head.store(next, Ordering::Relaxed);
            let count = h.local_count.load(Ordering::Relaxed);
            h.local_count.store(count - 1, Ordering::Relaxed);
            return Some(head);
        }
        let g = self.geometry();
        let bump = h.bump.load(Ordering::Relaxed) as usize;
        if bump < g.blocks_per_span {
            h.bump.store(bump as u32 + 1, Ordering::Relaxed);
            return Some(self.base() + g.header_size + bump * g.block_size);
        }
        None
    }

    /// Pushes `block` on the local list. Owner only.
    #[inline]
    pub fn free_local(self, block: usize) -> usize {
        let h = self.header();
        debug_assert!(self.owns_block(block));
        let head = h.local_head.load(Ordering::Relaxed);
        // SAFETY: block is a dead block of this span.
        unsafe { (block as *mut usize).write(head) };
        h.local_head.store(block, Ordering::Relaxed);
        let count = h.local_count.load(Ordering::Relaxed) + 1;
        h.local_count.store(count, Ordering::SeqCst);
        count as usize
    }

    /// Pushes `block` on the remote list; any thread.
    #[inline]
    pub fn free_remote(self, block: usize) -> usize {
        let h = self.header();
        debug_assert!(self.owns_block(block));
        let offset = (block - self.base()) as u64;
        let mut cur = h.remote.word.load(Ordering::Relaxed);
        loop {
            let next = match remote_head_offset(cur) {
                0 => 0,
                off => self.base() + off,
            };
            // SAFETY: block is a dead block of this span.
            unsafe { (block as *mut usize).write(next) };
            let count = remote_count(cur) as u64 + 1;
            match h.remote.word.compare_exchange_weak(
                cur,
                remote_pack(count, offset),
                Ordering::SeqCst,
                Ordering::Relaxed,
            ) {
                Ok(_) => return count as usize,
                Err(now) => cur = now,
            }
        }
    }

    pub fn remote_count(self) -> usize {
        remote_count(self.header().remote.word.load(Ordering::SeqCst))
    }

    pub fn local_count(self) -> usize {
        self.header().local_count.load(Ordering::SeqCst) as usize
    }

    /// Blocks never handed out yet.
    pub fn never_used(self) -> usize {
        self.geometry().blocks_per_span - self.header().bump.load(Ordering::SeqCst) as usize
    }

    pub fn free_blocks(self) -> usize {
        self.local_count() + self.remote_count() + self.never_used()
    }

    pub fn is_empty_of_live_blocks(self) -> bool {
        self.free_blocks() == self.geometry().blocks_per_span
    }

    /// Moves the whole remote list to the local list when it holds more than
    /// `threshold` blocks. Owner only. Returns the number moved.
    pub fn drain_remotes(self, threshold: usize) -> usize {
        let h = self.header();
        if remote_count(h.remote.word.load(Ordering::SeqCst)) <= threshold {
            return 0;
        }
        let word = h.remote.word.swap(0, Ordering::SeqCst);
        let n = remote_count(word);
        if n == 0 {
            return 0;
        }
        let head = self.base() + remote_head_offset(word);
        let local = h.local_head.load(Ordering::Relaxed);
        if local != 0 {
            let mut tail = head;
            // SAFETY: the swapped-out chain has exactly n members, all dead
            // blocks of this span.
            unsafe {
                for _ in 1..n {
                    tail = (tail as *const usize).read();
                }
                (tail as *mut usize).write(local);
            }
        }
        h.local_head.store(head, Ordering::Relaxed);
        let count = h.local_count.load(Ordering::Relaxed) + n as u32;
        h.local_count.store(count, Ordering::SeqCst);
        n
    }

    /// Single compare-and-swap of the epoch word. On success returns the new
    /// epoch; on failure the current one.
    pub fn try_transition(self, observed: Epoch, target: State) -> Result<Epoch, Epoch> {
        let legal = observed.state().is_some_and(|s| is_legal_edge(s, target));
        debug_assert!(legal, "illegal transition {observed:?} -> {target}");
        if !legal {
            return Err(self.epoch());
        }
        let next = observed.successor(target);
        self.header()
            .epoch
            .compare_exchange(observed.0, next.0, Ordering::SeqCst, Ordering::SeqCst)
            .map(|_| next)
            .map_err(Epoch)
    }

    /// Replaces the owner word if it still equals `observed`.
    pub fn try_adopt(self, observed: Owner, new_owner: Owner) -> bool {
        self.header()
            .owner
            .compare_exchange(observed.0, new_owner.0, Ordering::SeqCst, Ordering::SeqCst)
            .is_ok()
    }

    pub fn owns_block(self, block: usize) -> bool {
        let g = self.geometry();
        let start = self.base() + g.header_size;
        block >= start
            && block < start + g.payload_bytes()
            && (block - start) % g.block_size == 0
    }

    /// Index of `block` within the payload.
    pub fn block_index(self, block: usize) -> usize {
        (block - self.payload_start()) / self.geometry().block_size
    }

    /// Members of the local free list, head first.
    ///
    /// # Safety
    /// No thread may modify the span concurrently.
    pub unsafe fn local_blocks(self) -> Vec<usize> {
        let limit = self.geometry().blocks_per_span;
        let mut out = Vec::new();
        let mut cur = self.header().local_head.load(Ordering::SeqCst);
        while cur != 0 && out.len() <= limit {
            out.push(cur);
            cur = (cur as *const usize).read();
        }
        out
    }

    /// Members of the remote free list, head first.
    ///
    /// # Safety
    /// No thread may modify the span concurrently.
    pub unsafe fn remote_blocks(self) -> Vec<usize> {
        let limit = self.geometry().blocks_per_span;
        let word = self.header().remote.word.load(Ordering::SeqCst);
        let mut out = Vec::new();
        let mut cur = match remote_head_offset(word) {
            0 => 0,
            off => self.base() + off,
        };
        while cur != 0 && out.len() <= limit {
            out.push(cur);
            cur = (cur as *const usize).read();
        }
        out
    }
}
