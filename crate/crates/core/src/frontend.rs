//! Local allocation buffers and the paths that move spans between them, the
//! reusable sets, and the span pool.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, OnceLock};

use crate::config::{available_cores, Config, LabMode, ReclaimMode};
use crate::error::AllocError;
use crate::reusable_set::ReusableSet;
use crate::size_classes::{SizeClass, NUM_CLASSES};
use crate::span::{Epoch, Owner, SpanRef, State};
use crate::span_pool::{SpanPool, TaggedStack};
use crate::vmem::{VirtualMemory, VIRTUAL_SPAN_SIZE};

#[cfg(feature = "instrument")]
use crate::fragmeter::FragLedger;
#[cfg(feature = "instrument")]
use crate::trace::Transition;

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

#[derive(Debug)]
pub(crate) struct ClassSlot {
    /// Base of the hot span, zero if none.
    hot: AtomicUsize,
    /// Serializes owner-side work when threads share a buffer.
    latch: Mutex<()>,
    set: ReusableSet,
}

#[derive(Debug)]
pub(crate) struct Lab {
    owner: AtomicU64,
    classes: Box<[ClassSlot]>,
    /// Emptied spans waiting for the next slow-path allocation (lazy
    /// reclamation only).
    pending: TaggedStack,
}

impl Lab {
    fn new(index: usize) -> Lab {
        Lab {
            owner: AtomicU64::new(Owner::TERMINATED.raw()),
            classes: (0..NUM_CLASSES)
                .map(|c| ClassSlot {
                    hot: AtomicUsize::new(0),
                    latch: Mutex::new(()),
                    set: ReusableSet::new(set_id(index, c)),
                })
                .collect(),
            pending: TaggedStack::new(),
        }
    }

    fn owner(&self) -> Owner {
        Owner::from_raw(self.owner.load(Ordering::SeqCst))
    }
}

fn set_id(lab: usize, class: usize) -> u64 {
    (((lab as u64) << 8) | class as u64) + 1
}

/// What a calling thread knows about its buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThreadCtx {
    pub lab: usize,
    pub owner: Owner,
    pub ordinal: usize,
}

#[derive(Debug)]
struct Slots {
    next: usize,
    free: Vec<usize>,
    generation: Vec<u16>,
    attached: Vec<usize>,
}

#[derive(Debug, Default)]
struct Counters {
    pool_fetches: AtomicU64,
    set_fetches: AtomicU64,
    reclaimed: AtomicU64,
    adoptions: AtomicU64,
    terminations: AtomicU64,
    max_fetches_per_alloc: AtomicU64,
}

/// Slow-path counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FrontendStats {
    /// Hot spans taken from the span pool.
    pub pool_fetches: u64,
    /// Hot spans taken from a reusable set.
    pub set_fetches: u64,
    /// Spans moved to the free state.
    pub reclaimed: u64,
    pub adoptions: u64,
    pub terminations: u64,
    /// Most span fetches any single allocation needed.
    pub max_fetches_per_alloc: u64,
}

#[derive(Debug)]
pub(crate) struct Frontend {
    pub(crate) vm: Arc<dyn VirtualMemory>,
    pub(crate) pool: SpanPool,
    labs: Box<[OnceLock<Box<Lab>>]>,
    slots: Mutex<Slots>,
    thresholds: [usize; NUM_CLASSES],
    mode: LabMode,
    reclaim: ReclaimMode,
    guard_pages: bool,
    track_pages: bool,
    cores: usize,
    counters: Counters,
    #[cfg(feature = "instrument")]
    pub(crate) ledger: Option<Mutex<FragLedger>>,
    #[cfg(feature = "instrument")]
    pub(crate) trace: Option<Mutex<Vec<Transition>>>,
}

impl Frontend {
    pub(crate) fn new(config: &Config, vm: Arc<dyn VirtualMemory>, pool: SpanPool) -> Frontend {
        let mut thresholds = [0; NUM_CLASSES];
        for c in SizeClass::all() {
            let bps = c.geometry().blocks_per_span;
            thresholds[c.index()] = bps * config.reuse_percent as usize / 100;
        }
        let max = config.max_labs;
        Frontend {
            track_pages: vm.tracks_pages(),
            vm,
            pool,
            labs: (0..max).map(|_| OnceLock::new()).collect(),
            slots: Mutex::new(Slots {
                next: 0,
                free: Vec::new(),
                generation: vec![0; max],
                attached: vec![0; max],
            }),
            thresholds,
            mode: config.lab_mode,
            reclaim: config.reclaim,
            guard_pages: config.guard_pages,
            cores: available_cores().min(max),
            counters: Counters::default(),
            #[cfg(feature = "instrument")]
            ledger: config.frag_ledger.then(|| Mutex::new(FragLedger::default())),
            #[cfg(feature = "instrument")]
            trace: config.trace_transitions.then(|| Mutex::new(Vec::new())),
        }
    }

    /// Free blocks above which a floating span of `class` becomes reusable.
    pub(crate) fn threshold(&self, class: SizeClass) -> usize {
        self.thresholds[class.index()]
    }

    fn lab_at(&self, index: usize) -> &Lab {
        self.labs[index].get().expect("buffer used before attach")
    }

    fn lab_of(&self, owner: Owner) -> Option<&Lab> {
        if !owner.is_live_value() {
            return None;
        }
        self.labs.get(owner.lab_index())?.get().map(|b| &**b)
    }

    /// Owner value currently installed in buffer `index`.
    pub(crate) fn lab_owner(&self, index: usize) -> Option<Owner> {
        self.labs.get(index)?.get().map(|l| l.owner())
    }

    pub(crate) fn attach(&self, ordinal: usize) -> Result<ThreadCtx, AllocError> {
        let mut s = lock(&self.slots);
        let index = match self.mode {
            LabMode::Thread => match s.free.pop() {
                Some(i) => i,
                None if s.next < self.labs.len() => {
                    s.next += 1;
                    s.next - 1
                }
                None => return Err(AllocError::TooManyThreads { limit: self.labs.len() }),
            },
            LabMode::Core => ordinal % self.cores,
        };
        let lab = self.labs[index].get_or_init(|| Box::new(Lab::new(index)));
        if s.attached[index] == 0 {
            let generation = s.generation[index] % 0xFFFE + 1;
            s.generation[index] = generation;
            self.init_lab(lab, Owner::new(generation, index), ordinal);
        }
        s.attached[index] += 1;
        Ok(ThreadCtx { lab: index, owner: lab.owner(), ordinal })
    }

    pub(crate) fn detach(&self, ctx: ThreadCtx) {
        let mut s = lock(&self.slots);
        debug_assert!(s.attached[ctx.lab] > 0);
        s.attached[ctx.lab] -= 1;
        if s.attached[ctx.lab] == 0 {
            self.terminate_lab(self.lab_at(ctx.lab), ctx.ordinal);
            if self.mode == LabMode::Thread {
                s.free.push(ctx.lab);
            }
        }
    }

    fn init_lab(&self, lab: &Lab, owner: Owner, ordinal: usize) {
        self.flush_pending(lab, ordinal);
        lab.owner.store(owner.raw(), Ordering::SeqCst);
        for slot in lab.classes.iter() {
            debug_assert_eq!(slot.hot.load(Ordering::Relaxed), 0);
            slot.set.open(owner);
        }
    }

    fn terminate_lab(&self, lab: &Lab, ordinal: usize) {
        for (c, slot) in lab.classes.iter().enumerate() {
            let class = SizeClass::new(c).unwrap();
            let _latch = lock(&slot.latch);
            let members = slot.set.close();
            let hot = slot.hot.swap(0, Ordering::Relaxed);
            if hot != 0 {
                // SAFETY: hot spans live in this allocator's arena.
                let span = unsafe { SpanRef::from_base(hot) };
                let e = span.epoch();
                debug_assert!(e.is(State::Hot));
                if self.transition(span, e, State::Floating).is_ok() {
                    self.settle_after_detach(span, class, ordinal);
                }
            }
            for (span, e) in members {
                // A member that is no longer reusable was freed by a
                // concurrent last free, which also returned it to the pool.
                if e.is(State::Reusable) && self.transition(span, e, State::Floating).is_ok() {
                    self.settle_after_detach(span, class, ordinal);
                }
            }
        }
        self.flush_pending(lab, ordinal);
        lab.owner.store(Owner::TERMINATED.raw(), Ordering::SeqCst);
        self.counters.terminations.fetch_add(1, Ordering::Relaxed);
    }

    fn settle_after_detach(&self, span: SpanRef, class: SizeClass, ordinal: usize) {
        if self.settle(span, ordinal, false) {
            self.ledger_reclaim(class);
        }
    }

    fn flush_pending(&self, lab: &Lab, ordinal: usize) {
        while let Some(span) = lab.pending.pop() {
            // SAFETY: pending spans are free and referenced only here.
            unsafe { self.pool.put(span, ordinal) };
        }
    }

    #[inline]
    fn transition(&self, span: SpanRef, observed: Epoch, target: State) -> Result<Epoch, Epoch> {
        let r = span.try_transition(observed, target);
        #[cfg(feature = "instrument")]
        if let (Some(trace), Ok(to)) = (&self.trace, r) {
            lock(trace).push(Transition { span: span.base(), from: observed, to });
        }
        r
    }

    pub(crate) fn allocate(&self, ctx: ThreadCtx, class: SizeClass) -> Result<usize, AllocError> {
        let lab = self.lab_at(ctx.lab);
        let slot = &lab.classes[class.index()];
        let _latch = (self.mode == LabMode::Core).then(|| lock(&slot.latch));
        let mut fetched = false;
        let mut fetches = 0u64;
        loop {
            let hot = slot.hot.load(Ordering::Relaxed);
            if hot != 0 {
                // SAFETY: hot spans live in this allocator's arena.
                let span = unsafe { SpanRef::from_base(hot) };
                if let Some(block) = span.alloc_block() {
                    let g = class.geometry();
                    if self.track_pages {
                        self.vm.touch(block, g.block_size);
                    }
                    if fetches > 0 {
                        self.counters.max_fetches_per_alloc.fetch_max(fetches, Ordering::Relaxed);
                    }
                    self.ledger_alloc(fetched, class);
                    return Ok(block);
                }
                if span.drain_remotes(self.threshold(class)) > 0 {
                    continue;
                }
                slot.hot.store(0, Ordering::Relaxed);
                let e = span.epoch();
                let retired = self.transition(span, e, State::Floating);
                debug_assert!(retired.is_ok(), "hot span changed under its owner");
                if retired.is_ok() && self.settle(span, ctx.ordinal, true) {
                    self.ledger_reclaim(class);
                }
            }
            let (span, fresh) = self.get_span(lab, class, ctx)?;
            fetches += 1;
            fetched = fresh;
            slot.hot.store(span.base(), Ordering::Relaxed);
        }
    }

    /// A span in the hot state for `class`, and whether it came from the
    /// span pool rather than the reusable set.
    fn get_span(
        &self,
        lab: &Lab,
        class: SizeClass,
        ctx: ThreadCtx,
    ) -> Result<(SpanRef, bool), AllocError> {
        let slot = &lab.classes[class.index()];
        while let Some((span, e)) = slot.set.take() {
            if e.is(State::Reusable) && self.transition(span, e, State::Hot).is_ok() {
                self.counters.set_fetches.fetch_add(1, Ordering::Relaxed);
                return Ok((span, false));
            }
        }
        if self.reclaim == ReclaimMode::Lazy {
            self.flush_pending(lab, ctx.ordinal);
        }
        let g = class.geometry();
        let span = self.pool.get(g.real_span_index, ctx.ordinal)?;
        span.init_for_class(class, ctx.owner);
        if self.guard_pages {
            let _ = self.vm.protect_guard(span.base(), VIRTUAL_SPAN_SIZE, false);
            let _ = self.vm.protect_guard(
                span.base() + g.real_span_size,
                VIRTUAL_SPAN_SIZE - g.real_span_size,
                true,
            );
        }
        if self.track_pages {
            self.vm.touch(span.base(), g.header_size);
        }
        let e = span.epoch();
        let hot = self.transition(span, e, State::Hot);
        debug_assert!(hot.is_ok(), "free span raced: {e:?}");
        self.counters.pool_fetches.fetch_add(1, Ordering::Relaxed);
        Ok((span, true))
    }

    /// Frees `block`. `ctx` is `None` for threads without a buffer.
    pub(crate) fn deallocate(&self, ctx: Option<ThreadCtx>, block: usize) {
        // SAFETY: the caller routed an arena address here.
        let span = unsafe { SpanRef::from_base(block & !(VIRTUAL_SPAN_SIZE - 1)) };
        let class = span.size_class();
        let old_owner = span.owner();
        let ordinal = ctx.map_or(0, |c| c.ordinal);
        match ctx {
            Some(c) if c.owner == old_owner => {
                let _latch = (self.mode == LabMode::Core)
                    .then(|| lock(&self.lab_at(c.lab).classes[class.index()].latch));
                span.free_local(block);
            }
            _ => {
                span.free_remote(block);
                if let Some(c) = ctx {
                    if self.is_orphan(old_owner) && span.try_adopt(old_owner, c.owner) {
                        self.counters.adoptions.fetch_add(1, Ordering::Relaxed);
                    }
                }
            }
        }
        let last = self.settle(span, ordinal, true);
        self.ledger_free(last, class);
    }

    fn is_orphan(&self, owner: Owner) -> bool {
        self.lab_of(owner).is_none_or(|l| l.owner() != owner)
    }

    /// Applies the span rules to a span that is not hot: reclaim it when
    /// empty, otherwise offer it to its owner's reusable set when enough of
    /// it is free. Returns true if this call reclaimed the span.
    fn settle(&self, span: SpanRef, ordinal: usize, allow_reuse: bool) -> bool {
        let mut allow_reuse = allow_reuse;
        loop {
            let e = span.epoch();
            let state = match e.state() {
                Some(s @ (State::Floating | State::Reusable)) => s,
                _ => return false,
            };
            let class = span.size_class();
            let free = span.free_blocks();
            if free == class.geometry().blocks_per_span {
                let owner = span.owner();
                if self.transition(span, e, State::Free).is_ok() {
                    if state == State::Reusable {
                        if let Some(lab) = self.lab_of(owner) {
                            lab.classes[class.index()].set.remove(span);
                        }
                    }
                    self.release(span, owner, ordinal);
                    return true;
                }
                continue;
            }
            if allow_reuse && state == State::Floating && free > self.threshold(class) {
                allow_reuse = false;
                let owner = span.owner();
                if let Ok(reusable) = self.transition(span, e, State::Reusable) {
                    let placed = self
                        .lab_of(owner)
                        .is_some_and(|l| l.classes[class.index()].set.put(owner, span, reusable));
                    if !placed {
                        let _ = self.transition(span, reusable, State::Floating);
                    }
                }
                continue;
            }
            return false;
        }
    }

    fn release(&self, span: SpanRef, owner: Owner, ordinal: usize) {
        self.counters.reclaimed.fetch_add(1, Ordering::Relaxed);
        if self.reclaim == ReclaimMode::Lazy {
            if let Some(lab) = self.lab_of(owner).filter(|l| l.owner() == owner) {
                // SAFETY: the span just became free and only we hold it.
                unsafe { lab.pending.push(span) };
                return;
            }
        }
        // SAFETY: as above.
        unsafe { self.pool.put(span, ordinal) };
    }

    /// Spans parked for lazy reclamation, over all buffers.
    pub(crate) fn pending_spans(&self) -> usize {
        self.labs.iter().filter_map(|l| l.get()).map(|l| l.pending.len()).sum()
    }

    /// Reusable-set sizes per (buffer index, class), nonempty ones only.
    pub(crate) fn reusable_members(&self) -> Vec<(usize, SizeClass, Vec<SpanRef>)> {
        let mut out = Vec::new();
        for (i, lab) in self.labs.iter().enumerate() {
            let Some(lab) = lab.get() else { continue };
            for c in SizeClass::all() {
                let m = lab.classes[c.index()].set.members();
                if !m.is_empty() {
                    out.push((i, c, m));
                }
            }
        }
        out
    }

    pub(crate) fn hot_span(&self, lab: usize, class: SizeClass) -> Option<SpanRef> {
        let base = self.labs.get(lab)?.get()?.classes[class.index()].hot.load(Ordering::Relaxed);
        // SAFETY: hot spans live in this allocator's arena.
        (base != 0).then(|| unsafe { SpanRef::from_base(base) })
    }

    pub(crate) fn stats(&self) -> FrontendStats {
        let c = &self.counters;
        FrontendStats {
            pool_fetches: c.pool_fetches.load(Ordering::Relaxed),
            set_fetches: c.set_fetches.load(Ordering::Relaxed),
            reclaimed: c.reclaimed.load(Ordering::Relaxed),
            adoptions: c.adoptions.load(Ordering::Relaxed),
            terminations: c.terminations.load(Ordering::Relaxed),
            max_fetches_per_alloc: c.max_fetches_per_alloc.load(Ordering::Relaxed),
        }
    }

    pub(crate) fn reset_max_fetches(&self) {
        self.counters.max_fetches_per_alloc.store(0, Ordering::Relaxed);
    }

    #[inline]
    fn ledger_alloc(&self, _fetched: bool, _class: SizeClass) {
        #[cfg(feature = "instrument")]
        if let Some(l) = &self.ledger {
            let g = _class.geometry();
            lock(l).on_alloc(_fetched, g.block_size, g.payload_bytes());
        }
    }

    #[inline]
    fn ledger_free(&self, _last: bool, _class: SizeClass) {
        #[cfg(feature = "instrument")]
        if let Some(l) = &self.ledger {
            let g = _class.geometry();
            lock(l).on_free(_last, g.block_size, g.payload_bytes());
        }
    }

    fn ledger_reclaim(&self, _class: SizeClass) {
        #[cfg(feature = "instrument")]
        if let Some(l) = &self.ledger {
            let g = _class.geometry();
            lock(l).on_span_reclaimed(g.block_size, g.payload_bytes());
        }
    }
}
