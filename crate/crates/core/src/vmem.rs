//! Virtual-memory providers.
//!
//! The allocator never talks to the operating system directly. It reserves
//! its arena, maps huge objects, returns pages and installs guard ranges
//! through a [`VirtualMemory`] implementation:
//!
//! * [`OsVm`] maps anonymous memory and releases pages with
//!   `madvise(MADV_DONTNEED)`. It does not track residency; use
//!   [`resident_set_bytes`] for a process-wide figure.
//! * [`SimVm`] is backed by the same kind of mapping but keeps a shadow page
//!   set. Every page the allocator writes is reported through
//!   [`VirtualMemory::touch`], so committed memory is exact and
//!   deterministic.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock, RwLock};

use crate::error::VmError;

pub const PAGE_SIZE: usize = 4096;
/// Size and alignment of every virtual span.
pub const VIRTUAL_SPAN_SIZE: usize = 1 << 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VmRegion {
    pub base: usize,
    pub length: usize,
    pub page_size: usize,
}

impl VmRegion {
    pub fn end(&self) -> usize {
        self.base + self.length
    }

    pub fn contains(&self, addr: usize) -> bool {
        addr >= self.base && addr < self.end()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VmStats {
    /// Bytes currently committed. Always zero when `tracked` is false.
    pub committed_bytes: usize,
    /// High-water mark of `committed_bytes` since creation or the last
    /// [`VirtualMemory::reset_peak`].
    pub peak_committed_bytes: usize,
    pub reserved_bytes: usize,
    pub reserve_calls: u64,
    pub decommit_calls: u64,
    pub tracked: bool,
}

pub trait VirtualMemory: Send + Sync + fmt::Debug {
    fn page_size(&self) -> usize {
        PAGE_SIZE
    }

    /// Reserves `length` bytes aligned to [`VIRTUAL_SPAN_SIZE`]. Nothing is
    /// committed; pages read as zero on first touch.
    fn reserve(&self, length: usize) -> Result<VmRegion, VmError>;

    /// Unmaps a region obtained from [`reserve`](Self::reserve).
    fn release(&self, region: VmRegion);

    /// Maps `length` bytes (a page multiple) for a huge object.
    fn map_pages(&self, length: usize) -> Result<usize, VmError>;

    fn unmap_pages(&self, base: usize, length: usize);

    /// Drops the physical backing of a page-aligned range. Subsequent reads
    /// return zero.
    fn decommit(&self, base: usize, length: usize);

    /// Installs (`enable`) or removes an access guard on a page range.
    fn protect_guard(&self, base: usize, length: usize, enable: bool) -> Result<(), VmError>;

    /// Reports that `[base, base + length)` has been written.
    fn touch(&self, _base: usize, _length: usize) {}

    /// True when [`touch`](Self::touch) does any work.
    fn tracks_pages(&self) -> bool {
        false
    }

    fn stats(&self) -> VmStats;

    fn reset_peak(&self) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderKind {
    Os,
    Sim,
}

impl std::str::FromStr for ProviderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "os" => Ok(ProviderKind::Os),
            "sim" => Ok(ProviderKind::Sim),
            other => Err(format!("unknown provider {other:?}")),
        }
    }
}

impl fmt::Display for ProviderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProviderKind::Os => "os",
            ProviderKind::Sim => "sim",
        })
    }
}

pub fn make_provider(kind: ProviderKind, reserve_cap: usize) -> Arc<dyn VirtualMemory> {
    match kind {
        ProviderKind::Os => Arc::new(OsVm::with_cap(reserve_cap)),
        ProviderKind::Sim => Arc::new(SimVm::with_cap(reserve_cap)),
    }
}

/// Process resident set size, read from `/proc/self/statm`.
pub fn resident_set_bytes() -> Option<usize> {
    let statm = std::fs::read_to_string("/proc/self/statm").ok()?;
    let pages: usize = statm.split_whitespace().nth(1)?.parse().ok()?;
    Some(pages * PAGE_SIZE)
}

mod sys {
    use crate::error::VmError;

    fn errno() -> i32 {
        std::io::Error::last_os_error().raw_os_error().unwrap_or(0)
    }

    pub fn map(len: usize) -> Result<usize, VmError> {
        // SAFETY: anonymous private mapping with no address hint.
        let ptr = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                len,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | libc::MAP_NORESERVE,
                -1,
                0,
            )
        };
        if ptr == libc::MAP_FAILED {
            return Err(VmError::ReserveFailed { len, errno: errno() });
        }
        Ok(ptr as usize)
    }

    /// Maps `len` bytes aligned to `align` by over-reserving and trimming.
    pub fn map_aligned(len: usize, align: usize) -> Result<usize, VmError> {
        let raw = map(len + align)?;
        let base = (raw + align - 1) & !(align - 1);
        let head = base - raw;
        let tail = align - head;
        if head > 0 {
            unmap(raw, head);
        }
        if tail > 0 {
            unmap(base + len, tail);
        }
        Ok(base)
    }

    pub fn unmap(base: usize, len: usize) {
        // SAFETY: callers pass ranges they mapped and no longer reference.
        let rc = unsafe { libc::munmap(base as *mut libc::c_void, len) };
        debug_assert_eq!(rc, 0, "munmap({base:#x}, {len:#x}) failed");
    }

    pub fn dontneed(base: usize, len: usize) {
        // SAFETY: the range lies inside a private anonymous mapping we own.
        let rc = unsafe { libc::madvise(base as *mut libc::c_void, len, libc::MADV_DONTNEED) };
        debug_assert_eq!(rc, 0, "madvise({base:#x}, {len:#x}) failed");
    }

    pub fn protect(base: usize, len: usize, enable: bool) -> Result<(), VmError> {
        let prot = if enable { libc::PROT_NONE } else { libc::PROT_READ | libc::PROT_WRITE };
        // SAFETY: the range lies inside a mapping we own.
        let rc = unsafe { libc::mprotect(base as *mut libc::c_void, len, prot) };
        if rc != 0 {
            return Err(VmError::GuardUnsupported);
        }
        Ok(())
    }
}

fn check_span_length(length: usize) -> Result<(), VmError> {
    if length == 0 || length % VIRTUAL_SPAN_SIZE != 0 {
        return Err(VmError::BadLength { len: length, granule: VIRTUAL_SPAN_SIZE });
    }
    Ok(())
}

fn check_page_range(base: usize, length: usize) -> Result<(), VmError> {
    if base % PAGE_SIZE != 0 || length % PAGE_SIZE != 0 {
        return Err(VmError::Misaligned { base, len: length });
    }
    Ok(())
}

/// Real anonymous mappings; decommit is `MADV_DONTNEED`.
#[derive(Debug)]
pub struct OsVm {
    cap: usize,
    reserved: AtomicUsize,
    reserve_calls: AtomicU64,
    decommit_calls: AtomicU64,
}

impl OsVm {
    pub fn with_cap(cap: usize) -> Self {
        OsVm {
            cap,
            reserved: AtomicUsize::new(0),
            reserve_calls: AtomicU64::new(0),
            decommit_calls: AtomicU64::new(0),
        }
    }
}

impl Default for OsVm {
    fn default() -> Self {
        OsVm::with_cap(usize::MAX)
    }
}

impl VirtualMemory for OsVm {
    fn reserve(&self, length: usize) -> Result<VmRegion, VmError> {
        check_span_length(length)?;
        let prev = self.reserved.fetch_add(length, Ordering::Relaxed);
        if prev.saturating_add(length) > self.cap {
            self.reserved.fetch_sub(length, Ordering::Relaxed);
            return Err(VmError::CapExceeded { cap: self.cap });
        }
        let base = sys::map_aligned(length, VIRTUAL_SPAN_SIZE).inspect_err(|_| {
            self.reserved.fetch_sub(length, Ordering::Relaxed);
        })?;
        self.reserve_calls.fetch_add(1, Ordering::Relaxed);
        Ok(VmRegion { base, length, page_size: PAGE_SIZE })
    }

    fn release(&self, region: VmRegion) {
        sys::unmap(region.base, region.length);
        self.reserved.fetch_sub(region.length, Ordering::Relaxed);
    }

    fn map_pages(&self, length: usize) -> Result<usize, VmError> {
        check_page_range(0, length)?;
        sys::map(length)
    }

    fn unmap_pages(&self, base: usize, length: usize) {
        sys::unmap(base, length);
    }

    fn decommit(&self, base: usize, length: usize) {
        debug_assert!(check_page_range(base, length).is_ok());
        if length == 0 {
            return;
        }
        self.decommit_calls.fetch_add(1, Ordering::Relaxed);
        sys::dontneed(base, length);
    }

    fn protect_guard(&self, base: usize, length: usize, enable: bool) -> Result<(), VmError> {
        check_page_range(base, length)?;
        if length == 0 {
            return Ok(());
        }
        sys::protect(base, length, enable)
    }

    fn stats(&self) -> VmStats {
        VmStats {
            committed_bytes: 0,
            peak_committed_bytes: 0,
            reserved_bytes: self.reserved.load(Ordering::Relaxed),
            reserve_calls: self.reserve_calls.load(Ordering::Relaxed),
            decommit_calls: self.decommit_calls.load(Ordering::Relaxed),
            tracked: false,
        }
    }
}

/// One bit per page of a mapped region.
struct PageSet {
    base: usize,
    length: usize,
    bits: Box<[AtomicU64]>,
}

impl PageSet {
    fn new(base: usize, length: usize) -> Self {
        let pages = length / PAGE_SIZE;
        let words = pages.div_ceil(64);
        PageSet { base, length, bits: (0..words).map(|_| AtomicU64::new(0)).collect() }
    }

    fn contains(&self, addr: usize) -> bool {
        addr >= self.base && addr < self.base + self.length
    }

    /// Sets the bits for the page range, returning how many were newly set.
    fn set_range(&self, first: usize, last: usize) -> usize {
        let mut added = 0;
        for page in first..=last {
            let word = &self.bits[page / 64];
            let mask = 1u64 << (page % 64);
            if word.load(Ordering::Relaxed) & mask != 0 {
                continue;
            }
            if word.fetch_or(mask, Ordering::Relaxed) & mask == 0 {
                added += 1;
            }
        }
        added
    }

    fn clear_range(&self, first: usize, last: usize) -> usize {
        let mut removed = 0;
        for page in first..=last {
            let word = &self.bits[page / 64];
            let mask = 1u64 << (page % 64);
            if word.load(Ordering::Relaxed) & mask == 0 {
                continue;
            }
            if word.fetch_and(!mask, Ordering::Relaxed) & mask != 0 {
                removed += 1;
            }
        }
        removed
    }

    fn count(&self) -> usize {
        self.bits.iter().map(|w| w.load(Ordering::Relaxed).count_ones() as usize).sum()
    }

    fn is_set(&self, page: usize) -> bool {
        self.bits[page / 64].load(Ordering::Relaxed) & (1u64 << (page % 64)) != 0
    }
}

/// Mapping-backed provider with exact committed-page accounting.
pub struct SimVm {
    cap: usize,
    regions: RwLock<BTreeMap<usize, Arc<PageSet>>>,
    /// First reserved region, checked without taking the lock.
    primary: OnceLock<Arc<PageSet>>,
    committed_pages: AtomicUsize,
    peak_pages: AtomicUsize,
    reserved: AtomicUsize,
    reserve_calls: AtomicU64,
    decommit_calls: AtomicU64,
    guards: Mutex<Vec<(usize, usize)>>,
    any_guard: AtomicBool,
    guard_violations: AtomicU64,
}

impl fmt::Debug for SimVm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SimVm").field("stats", &self.stats()).finish()
    }
}

impl Default for SimVm {
    fn default() -> Self {
        SimVm::with_cap(usize::MAX)
    }
}

impl SimVm {
    pub fn with_cap(cap: usize) -> Self {
        SimVm {
            cap,
            regions: RwLock::new(BTreeMap::new()),
            primary: OnceLock::new(),
            committed_pages: AtomicUsize::new(0),
            peak_pages: AtomicUsize::new(0),
            reserved: AtomicUsize::new(0),
            reserve_calls: AtomicU64::new(0),
            decommit_calls: AtomicU64::new(0),
            guards: Mutex::new(Vec::new()),
            any_guard: AtomicBool::new(false),
            guard_violations: AtomicU64::new(0),
        }
    }

    fn region_for(&self, addr: usize) -> Option<Arc<PageSet>> {
        if let Some(p) = self.primary.get() {
            if p.contains(addr) {
                return Some(p.clone());
            }
        }
        let regions = self.regions.read().unwrap();
        let (_, set) = regions.range(..=addr).next_back()?;
        set.contains(addr).then(|| set.clone())
    }

    fn register(&self, base: usize, length: usize) {
        let set = Arc::new(PageSet::new(base, length));
        let _ = self.primary.set(set.clone());
        self.regions.write().unwrap().insert(base, set);
    }

    fn forget(&self, base: usize) {
        if let Some(set) = self.regions.write().unwrap().remove(&base) {
            let pages = set.count();
            self.committed_pages.fetch_sub(pages, Ordering::Relaxed);
        }
    }

    fn add_committed(&self, pages: usize) {
        if pages == 0 {
            return;
        }
        let now = self.committed_pages.fetch_add(pages, Ordering::Relaxed) + pages;
        self.peak_pages.fetch_max(now, Ordering::Relaxed);
    }

    /// Checks an access against the installed guards, as a faulting load
    /// would.
    pub fn probe(&self, addr: usize) -> Result<(), VmError> {
        if self.in_guard(addr, 1) {
            return Err(VmError::GuardFault { addr });
        }
        Ok(())
    }

    /// Number of touches that landed inside a guard range.
    pub fn guard_violations(&self) -> u64 {
        self.guard_violations.load(Ordering::Relaxed)
    }

    pub fn guard_ranges(&self) -> Vec<(usize, usize)> {
        self.guards.lock().unwrap().clone()
    }

    /// Whether the page containing `addr` is currently committed.
    pub fn is_committed(&self, addr: usize) -> bool {
        self.region_for(addr)
            .map(|set| set.is_set((addr - set.base) / PAGE_SIZE))
            .unwrap_or(false)
    }

    /// Committed bytes within `[base, base + length)`.
    pub fn committed_in(&self, base: usize, length: usize) -> usize {
        let Some(set) = self.region_for(base) else { return 0 };
        let first = (base - set.base) / PAGE_SIZE;
        let last = (base + length - 1 - set.base) / PAGE_SIZE;
        (first..=last).filter(|&p| set.is_set(p)).count() * PAGE_SIZE
    }

    fn in_guard(&self, base: usize, length: usize) -> bool {
        if !self.any_guard.load(Ordering::Relaxed) {
            return false;
        }
        let end = base + length;
        self.guards.lock().unwrap().iter().any(|&(g, glen)| base < g + glen && g < end)
    }
}

impl VirtualMemory for SimVm {
    fn reserve(&self, length: usize) -> Result<VmRegion, VmError> {
        check_span_length(length)?;
        let prev = self.reserved.fetch_add(length, Ordering::Relaxed);
        if prev.saturating_add(length) > self.cap {
            self.reserved.fetch_sub(length, Ordering::Relaxed);
            return Err(VmError::CapExceeded { cap: self.cap });
        }
        let base = sys::map_aligned(length, VIRTUAL_SPAN_SIZE).inspect_err(|_| {
            self.reserved.fetch_sub(length, Ordering::Relaxed);
        })?;
        self.register(base, length);
        self.reserve_calls.fetch_add(1, Ordering::Relaxed);
        Ok(VmRegion { base, length, page_size: PAGE_SIZE })
    }

    fn release(&self, region: VmRegion) {
        self.forget(region.base);
        sys::unmap(region.base, region.length);
        self.reserved.fetch_sub(region.length, Ordering::Relaxed);
    }

    fn map_pages(&self, length: usize) -> Result<usize, VmError> {
        check_page_range(0, length)?;
        let base = sys::map(length)?;
        self.register(base, length);
        Ok(base)
    }

    fn unmap_pages(&self, base: usize, length: usize) {
        self.forget(base);
        sys::unmap(base, length);
    }

    fn decommit(&self, base: usize, length: usize) {
        debug_assert!(check_page_range(base, length).is_ok());
        if length == 0 {
            return;
        }
        let set = self.region_for(base);
        debug_assert!(
            set.as_ref().is_some_and(|s| base + length <= s.base + s.length),
            "decommit outside reserved region"
        );
        self.decommit_calls.fetch_add(1, Ordering::Relaxed);
        if let Some(set) = set {
            let first = (base - set.base) / PAGE_SIZE;
            let last = (base + length - 1 - set.base) / PAGE_SIZE;
            let removed = set.clear_range(first, last);
            self.committed_pages.fetch_sub(removed, Ordering::Relaxed);
        }
        sys::dontneed(base, length);
    }

    fn protect_guard(&self, base: usize, length: usize, enable: bool) -> Result<(), VmError> {
        check_page_range(base, length)?;
        if length == 0 {
            return Ok(());
        }
        let mut guards = self.guards.lock().unwrap();
        let end = base + length;
        // Remove any overlap first so that ranges never double up.
        let mut kept = Vec::with_capacity(guards.len() + 1);
        for &(g, glen) in guards.iter() {
            let gend = g + glen;
            if gend <= base || g >= end {
                kept.push((g, glen));
                continue;
            }
            if g < base {
                kept.push((g, base - g));
            }
            if gend > end {
                kept.push((end, gend - end));
            }
        }
        if enable {
            kept.push((base, length));
        }
        *guards = kept;
        self.any_guard.store(!guards.is_empty(), Ordering::Relaxed);
        Ok(())
    }

    fn touch(&self, base: usize, length: usize) {
        if length == 0 {
            return;
        }
        if self.in_guard(base, length) {
            self.guard_violations.fetch_add(1, Ordering::Relaxed);
        }
        let Some(set) = self.region_for(base) else {
            debug_assert!(false, "touch outside any region: {base:#x}");
            return;
        };
        let first = (base - set.base) / PAGE_SIZE;
        let last = (base + length - 1 - set.base) / PAGE_SIZE;
        let added = set.set_range(first, last);
        self.add_committed(added);
    }

    fn tracks_pages(&self) -> bool {
        true
    }

    fn stats(&self) -> VmStats {
        VmStats {
            committed_bytes: self.committed_pages.load(Ordering::Relaxed) * PAGE_SIZE,
            peak_committed_bytes: self.peak_pages.load(Ordering::Relaxed) * PAGE_SIZE,
            reserved_bytes: self.reserved.load(Ordering::Relaxed),
            reserve_calls: self.reserve_calls.load(Ordering::Relaxed),
            decommit_calls: self.decommit_calls.load(Ordering::Relaxed),
            tracked: true,
        }
    }

    fn reset_peak(&self) {
        self.peak_pages.store(self.committed_pages.load(Ordering::Relaxed), Ordering::Relaxed);
    }
}
