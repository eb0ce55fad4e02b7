use std::alloc::{GlobalAlloc, Layout};
use std::cell::{Cell, RefCell};
use std::ptr::{self, NonNull};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Weak};

use crate::arena::Arena;
use crate::config::Config;
use crate::error::AllocError;
use crate::frontend::{Frontend, FrontendStats, ThreadCtx};
use crate::size_classes::{class_for_size, SizeClass, SizeRoute, MAX_CLASS_SIZE};
use crate::span::{Owner, SpanRef, State};
use crate::span_pool::{PoolStackStats, SpanPool};
use crate::vmem::{make_provider, VirtualMemory, VmStats, PAGE_SIZE};

const HUGE_MAGIC: u64 = 0x5350_414e_4855_4745;
pub const MAX_ALIGN: usize = PAGE_SIZE;

/// Sits in the page just below a huge object's payload.
#[repr(C)]
struct HugeHeader {
    magic: u64,
    payload_size: usize,
    total: usize,
}

static NEXT_ALLOCATOR_ID: AtomicU64 = AtomicU64::new(1);
static NEXT_ORDINAL: AtomicUsize = AtomicUsize::new(0);

struct Attachment {
    id: u64,
    inner: Weak<Inner>,
    ctx: ThreadCtx,
}

impl Drop for Attachment {
    fn drop(&mut self) {
        let _ = LAST.try_with(|c| {
            if c.get().is_some_and(|(id, _)| id == self.id) {
                c.set(None);
            }
        });
        if let Some(inner) = self.inner.upgrade() {
            inner.frontend.detach(self.ctx);
        }
    }
}

thread_local! {
    static ORDINAL: Cell<usize> = const { Cell::new(usize::MAX) };
    static LAST: Cell<Option<(u64, ThreadCtx)>> = const { Cell::new(None) };
    static ATTACHMENTS: RefCell<Vec<Attachment>> = const { RefCell::new(Vec::new()) };
}

fn thread_ordinal() -> usize {
    ORDINAL
        .try_with(|o| {
            if o.get() == usize::MAX {
                o.set(NEXT_ORDINAL.fetch_add(1, Ordering::Relaxed));
            }
            o.get()
        })
        .unwrap_or(0)
}

#[derive(Debug)]
struct Inner {
    id: u64,
    config: Config,
    frontend: Frontend,
    huge_live_bytes: AtomicUsize,
    huge_live_count: AtomicUsize,
}

/// A span-based allocator instance.
///
/// Each thread that allocates gets a local allocation buffer on first use
/// and gives it back when it exits (or calls
/// [`detach_current_thread`](Allocator::detach_current_thread)).
///
/// The allocator uses the standard library internally, so it cannot be the
/// process-wide `#[global_allocator]`; the [`GlobalAlloc`] impl is for
/// explicit use.
#[derive(Debug, Clone)]
pub struct Allocator {
    inner: Arc<Inner>,
}

/// Where an address lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockInfo {
    Span { span: usize, class: SizeClass, block_size: usize },
    Huge { payload_size: usize, total: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocatorStats {
    pub vm: VmStats,
    pub frontend: FrontendStats,
    pub arena_spans: usize,
    pub pooled_spans: usize,
    pub pending_spans: usize,
    pub decommitted_bytes: usize,
    pub huge_live_bytes: usize,
    pub huge_live_count: usize,
}

/// Header fields of one span, read without synchronization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanInfo {
    pub base: usize,
    pub state: Option<State>,
    pub class: SizeClass,
    pub owner: Owner,
    pub blocks_per_span: usize,
    pub local_free: Vec<usize>,
    pub remote_free: Vec<usize>,
    pub remote_count: usize,
    pub never_used: usize,
}

impl SpanInfo {
    pub fn free_blocks(&self) -> usize {
        self.local_free.len() + self.remote_free.len() + self.never_used
    }

    pub fn live_blocks(&self) -> usize {
        self.blocks_per_span - self.free_blocks()
    }
}

fn round_up(n: usize, to: usize) -> Option<usize> {
    Some(n.checked_add(to - 1)? & !(to - 1))
}

impl Allocator {
    pub fn new(config: Config) -> Result<Allocator, AllocError> {
        let vm = make_provider(config.provider, config.arena_bytes);
        Allocator::with_provider(config, vm)
    }

    /// Uses `vm` for every mapping, ignoring `config.provider`.
    pub fn with_provider(config: Config, vm: Arc<dyn VirtualMemory>) -> Result<Allocator, AllocError> {
        config.validate()?;
        let arena = Arena::new(vm.clone(), config.arena_bytes)?;
        let pool = SpanPool::new(
            arena,
            vm.clone(),
            config.pool_width,
            config.decommit,
            config.decommit_threshold,
        );
        let frontend = Frontend::new(&config, vm, pool);
        Ok(Allocator {
            inner: Arc::new(Inner {
                id: NEXT_ALLOCATOR_ID.fetch_add(1, Ordering::Relaxed),
                config,
                frontend,
                huge_live_bytes: AtomicUsize::new(0),
                huge_live_count: AtomicUsize::new(0),
            }),
        })
    }

    pub fn config(&self) -> &Config {
        &self.inner.config
    }

    pub fn vm(&self) -> &Arc<dyn VirtualMemory> {
        &self.inner.frontend.vm
    }

    fn frontend(&self) -> &Frontend {
        &self.inner.frontend
    }

    pub fn arena(&self) -> &Arena {
        self.frontend().pool.arena()
    }

    /// The calling thread's buffer, attaching one if needed.
    pub fn thread_ctx(&self) -> Result<ThreadCtx, AllocError> {
        let id = self.inner.id;
        if let Ok(Some((last, ctx))) = LAST.try_with(Cell::get) {
            if last == id {
                return Ok(ctx);
            }
        }
        let ctx = ATTACHMENTS
            .try_with(|cell| -> Result<ThreadCtx, AllocError> {
                let mut list = cell.try_borrow_mut().map_err(|_| AllocError::Detached)?;
                if let Some(a) = list.iter().find(|a| a.id == id) {
                    return Ok(a.ctx);
                }
                list.retain(|a| a.inner.strong_count() > 0);
                let ctx = self.frontend().attach(thread_ordinal())?;
                list.push(Attachment { id, inner: Arc::downgrade(&self.inner), ctx });
                Ok(ctx)
            })
            .map_err(|_| AllocError::Detached)??;
        let _ = LAST.try_with(|c| c.set(Some((id, ctx))));
        Ok(ctx)
    }

    /// Gives the calling thread's buffer back, as thread exit would.
    pub fn detach_current_thread(&self) {
        let id = self.inner.id;
        let taken = ATTACHMENTS
            .try_with(|cell| {
                let mut list = cell.borrow_mut();
                list.iter().position(|a| a.id == id).map(|i| list.swap_remove(i))
            })
            .ok()
            .flatten();
        drop(taken);
    }

    pub fn try_alloc(&self, size: usize) -> Result<NonNull<u8>, AllocError> {
        match class_for_size(size) {
            SizeRoute::Class(class) => {
                let ctx = self.thread_ctx()?;
                let block = self.frontend().allocate(ctx, class)?;
                // SAFETY: blocks are never at address zero.
                Ok(unsafe { NonNull::new_unchecked(block as *mut u8) })
            }
            SizeRoute::Huge => self.alloc_huge(size),
        }
    }

    /// Null on failure.
    pub fn alloc(&self, size: usize) -> *mut u8 {
        self.try_alloc(size).map_or(ptr::null_mut(), NonNull::as_ptr)
    }

    fn alloc_huge(&self, size: usize) -> Result<NonNull<u8>, AllocError> {
        let payload = round_up(size, PAGE_SIZE).ok_or(AllocError::TooLarge { size })?;
        let total = payload + PAGE_SIZE;
        let vm = self.vm();
        let base = vm.map_pages(total)?;
        if vm.tracks_pages() {
            vm.touch(base, total);
        }
        // SAFETY: fresh read-write mapping of at least one page.
        unsafe {
            (base as *mut HugeHeader).write(HugeHeader { magic: HUGE_MAGIC, payload_size: size, total });
        }
        self.inner.huge_live_bytes.fetch_add(total, Ordering::Relaxed);
        self.inner.huge_live_count.fetch_add(1, Ordering::Relaxed);
        // SAFETY: base + one page is inside the mapping and nonzero.
        Ok(unsafe { NonNull::new_unchecked((base + PAGE_SIZE) as *mut u8) })
    }

    fn huge_header(&self, addr: usize) -> Result<&HugeHeader, AllocError> {
        if addr % PAGE_SIZE != 0 || addr < PAGE_SIZE {
            return Err(AllocError::BadHugeHeader { addr, found: 0 });
        }
        // SAFETY: a page-aligned address from `alloc_huge` has its header
        // one page below; anything else is caught by the magic check as far
        // as the read itself is possible.
        let h = unsafe { &*((addr - PAGE_SIZE) as *const HugeHeader) };
        if h.magic != HUGE_MAGIC {
            return Err(AllocError::BadHugeHeader { addr, found: h.magic });
        }
        Ok(h)
    }

    /// Frees `ptr`; null is a no-op. Out-of-arena addresses must carry a
    /// valid huge-object header.
    ///
    /// # Safety
    /// `ptr` must be null or a live allocation of this allocator.
    pub unsafe fn try_dealloc(&self, ptr: *mut u8) -> Result<(), AllocError> {
        let addr = ptr as usize;
        if addr == 0 {
            return Ok(());
        }
        if self.arena().contains(addr) {
            let ctx = self.thread_ctx().ok();
            self.frontend().deallocate(ctx, addr);
            return Ok(());
        }
        let h = self.huge_header(addr)?;
        let total = h.total;
        let base = addr - PAGE_SIZE;
        (base as *mut u64).write(0);
        self.vm().unmap_pages(base, total);
        self.inner.huge_live_bytes.fetch_sub(total, Ordering::Relaxed);
        self.inner.huge_live_count.fetch_sub(1, Ordering::Relaxed);
        Ok(())
    }

    /// Like [`try_dealloc`](Self::try_dealloc) but aborts the process on a
    /// bad free.
    ///
    /// # Safety
    /// As for `try_dealloc`.
    pub unsafe fn dealloc(&self, ptr: *mut u8) {
        if let Err(e) = self.try_dealloc(ptr) {
            eprintln!("spanalloc: invalid free of {ptr:p}: {e}");
            std::process::abort();
        }
    }

    /// Zeroed memory for `n` elements of `size` bytes.
    pub fn calloc(&self, n: usize, size: usize) -> *mut u8 {
        let Some(total) = n.checked_mul(size) else { return ptr::null_mut() };
        let p = self.alloc(total);
        if !p.is_null() && total <= MAX_CLASS_SIZE {
            // Recycled blocks hold stale data; huge mappings are always fresh.
            // SAFETY: p has at least `total` writable bytes.
            unsafe { ptr::write_bytes(p, 0, total) };
        }
        p
    }

    /// Usable bytes at `ptr`.
    ///
    /// # Safety
    /// `ptr` must be a live allocation of this allocator.
    pub unsafe fn usable_size(&self, ptr: *const u8) -> usize {
        match self.block_info(ptr) {
            Some(BlockInfo::Span { block_size, .. }) => block_size,
            Some(BlockInfo::Huge { payload_size, .. }) => payload_size,
            None => 0,
        }
    }

    /// # Safety
    /// `ptr` must be a live allocation of this allocator.
    pub unsafe fn block_info(&self, ptr: *const u8) -> Option<BlockInfo> {
        let addr = ptr as usize;
        if addr == 0 {
            return None;
        }
        if self.arena().contains(addr) {
            let span = SpanRef::from_base(self.arena().owning_span_base(addr));
            let class = span.size_class();
            return Some(BlockInfo::Span { span: span.base(), class, block_size: class.block_size() });
        }
        let h = self.huge_header(addr).ok()?;
        Some(BlockInfo::Huge { payload_size: h.payload_size, total: h.total })
    }

    /// Allocate, copy, free. Null `ptr` allocates; on failure the old block
    /// is left alone and null is returned.
    ///
    /// # Safety
    /// `ptr` must be null or a live allocation of this allocator.
    pub unsafe fn realloc(&self, ptr: *mut u8, size: usize) -> *mut u8 {
        if ptr.is_null() {
            return self.alloc(size);
        }
        let old = self.usable_size(ptr);
        let new = self.alloc(size);
        if new.is_null() {
            return new;
        }
        ptr::copy_nonoverlapping(ptr, new, old.min(size));
        self.dealloc(ptr);
        new
    }

    /// `align` must be a power of two no larger than 4096.
    pub fn try_aligned_alloc(&self, align: usize, size: usize) -> Result<NonNull<u8>, AllocError> {
        if !align.is_power_of_two() || align > MAX_ALIGN {
            return Err(AllocError::BadAlignment { align });
        }
        if align <= 16 {
            return self.try_alloc(size);
        }
        // Large-class blocks are aligned to min(block size, page size);
        // rounding up to such a class covers every alignment we accept.
        let size = if size > MAX_CLASS_SIZE { size } else { size.max(align).max(512) };
        self.try_alloc(size)
    }

    pub fn aligned_alloc(&self, align: usize, size: usize) -> *mut u8 {
        self.try_aligned_alloc(align, size).map_or(ptr::null_mut(), NonNull::as_ptr)
    }

    pub fn stats(&self) -> AllocatorStats {
        let fe = self.frontend();
        AllocatorStats {
            vm: self.vm().stats(),
            frontend: fe.stats(),
            arena_spans: self.arena().spans_acquired(),
            pooled_spans: fe.pool.len(),
            pending_spans: fe.pending_spans(),
            decommitted_bytes: fe.pool.decommitted_bytes(),
            huge_live_bytes: self.inner.huge_live_bytes.load(Ordering::Relaxed),
            huge_live_count: self.inner.huge_live_count.load(Ordering::Relaxed),
        }
    }

    pub fn pool_stats(&self) -> Vec<PoolStackStats> {
        self.frontend().pool.stats()
    }

    pub fn reset_max_fetches(&self) {
        self.frontend().reset_max_fetches();
    }

    /// Free blocks above which a floating span becomes reusable.
    pub fn reuse_threshold(&self, class: SizeClass) -> usize {
        self.frontend().threshold(class)
    }

    pub fn lab_owner(&self, index: usize) -> Option<Owner> {
        self.frontend().lab_owner(index)
    }

    pub fn hot_span(&self, lab: usize, class: SizeClass) -> Option<usize> {
        self.frontend().hot_span(lab, class).map(SpanRef::base)
    }

    /// Reusable-set members per (buffer, class).
    pub fn reusable_sets(&self) -> Vec<(usize, SizeClass, Vec<usize>)> {
        self.frontend()
            .reusable_members()
            .into_iter()
            .map(|(l, c, m)| (l, c, m.into_iter().map(SpanRef::base).collect()))
            .collect()
    }

    /// Whether the span at `base` is in the span pool.
    ///
    /// # Safety
    /// No thread may use the allocator concurrently.
    pub unsafe fn pool_contains(&self, base: usize) -> bool {
        self.frontend().pool.contains(SpanRef::from_base(base))
    }

    /// Bases of all pooled spans.
    ///
    /// # Safety
    /// No thread may use the allocator concurrently.
    pub unsafe fn pooled_spans(&self) -> Vec<usize> {
        self.frontend().pool.members().into_iter().map(SpanRef::base).collect()
    }

    /// Every span handed out by the arena so far.
    ///
    /// # Safety
    /// No thread may use the allocator concurrently.
    pub unsafe fn spans(&self) -> Vec<SpanInfo> {
        self.arena()
            .acquired_bases()
            .map(|base| {
                let s = SpanRef::from_base(base);
                SpanInfo {
                    base,
                    state: s.epoch().state(),
                    class: s.size_class(),
                    owner: s.owner(),
                    blocks_per_span: s.geometry().blocks_per_span,
                    local_free: s.local_blocks(),
                    remote_free: s.remote_blocks(),
                    remote_count: s.remote_count(),
                    never_used: s.never_used(),
                }
            })
            .collect()
    }

    /// Current fragmentation ledger value, if the ledger is on.
    #[cfg(feature = "instrument")]
    pub fn frag_f(&self) -> Option<i64> {
        self.frontend().ledger.as_ref().map(|l| l.lock().unwrap().f())
    }

    #[cfg(feature = "instrument")]
    pub fn frag_ledger(&self) -> Option<crate::fragmeter::FragLedger> {
        self.frontend().ledger.as_ref().map(|l| l.lock().unwrap().clone())
    }

    /// Recorded transitions, if tracing is on.
    #[cfg(feature = "instrument")]
    pub fn transitions(&self) -> Vec<crate::trace::Transition> {
        self.frontend().trace.as_ref().map(|t| t.lock().unwrap().clone()).unwrap_or_default()
    }
}

unsafe impl GlobalAlloc for Allocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        self.aligned_alloc(layout.align(), layout.size())
    }

    unsafe fn dealloc(&self, ptr: *mut u8, _layout: Layout) {
        Allocator::dealloc(self, ptr)
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = self.aligned_alloc(layout.align(), layout.size());
        if !p.is_null() && layout.size() <= MAX_CLASS_SIZE {
            ptr::write_bytes(p, 0, layout.size());
        }
        p
    }
}
