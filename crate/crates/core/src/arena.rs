use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{AllocError, VmError};
use crate::vmem::{VirtualMemory, VmRegion, VIRTUAL_SPAN_SIZE};

/// One large reservation carved into 2MB virtual spans by a bump cursor.
///
/// Spans are never given back to the arena; recycling is the span pool's
/// job.
#[derive(Debug)]
pub struct Arena {
    region: VmRegion,
    cursor: AtomicUsize,
    vm: Arc<dyn VirtualMemory>,
}

impl Arena {
    pub fn new(vm: Arc<dyn VirtualMemory>, length: usize) -> Result<Arena, VmError> {
        let region = vm.reserve(length)?;
        Ok(Arena { region, cursor: AtomicUsize::new(0), vm })
    }

    pub fn region(&self) -> VmRegion {
        self.region
    }

    pub fn capacity(&self) -> usize {
        self.region.length / VIRTUAL_SPAN_SIZE
    }

    /// Spans handed out so far.
    pub fn spans_acquired(&self) -> usize {
        self.cursor.load(Ordering::Relaxed).min(self.capacity())
    }

    pub fn acquire_virtual_span(&self) -> Result<usize, AllocError> {
        let i = self.cursor.fetch_add(1, Ordering::Relaxed);
        if i >= self.capacity() {
            return Err(AllocError::ArenaExhausted { spans: self.capacity() });
        }
        Ok(self.region.base + i * VIRTUAL_SPAN_SIZE)
    }

    #[inline]
    pub fn contains(&self, addr: usize) -> bool {
        addr.wrapping_sub(self.region.base) < self.region.length
    }

    #[inline]
    pub fn owning_span_base(&self, addr: usize) -> usize {
        debug_assert!(self.contains(addr));
        addr & !(VIRTUAL_SPAN_SIZE - 1)
    }

    /// Bases of every span acquired so far, in acquisition order.
    pub fn acquired_bases(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.spans_acquired()).map(move |i| self.region.base + i * VIRTUAL_SPAN_SIZE)
    }
}

impl Drop for Arena {
    fn drop(&mut self) {
        self.vm.release(self.region);
    }
}
