//! Per-(buffer, class) set of reusable spans.
//!
//! A latch-protected doubly linked list threaded through the span headers,
//! gated by the owner value of the buffer it belongs to. Every operation is
//! a constant amount of work under the latch, except `close`, which hands
//! back all members at once.

use std::sync::atomic::Ordering;
use std::sync::Mutex;

use crate::span::{Epoch, Owner, SpanRef, State};

#[derive(Debug)]
struct Members {
    gate: Owner,
    head: usize,
    tail: usize,
    len: usize,
}

#[derive(Debug)]
pub struct ReusableSet {
    /// Nonzero tag stored in a member's header.
    id: u64,
    inner: Mutex<Members>,
}

fn span_at(base: usize) -> SpanRef {
    // SAFETY: only span bases of live arenas are linked into sets.
    unsafe { SpanRef::from_base(base) }
}

impl ReusableSet {
    pub fn new(id: u64) -> ReusableSet {
        assert!(id != 0);
        ReusableSet {
            id,
            inner: Mutex::new(Members { gate: Owner::TERMINATED, head: 0, tail: 0, len: 0 }),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Members> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn open(&self, owner: Owner) {
        let mut m = self.lock();
        debug_assert_eq!(m.len, 0);
        m.gate = owner;
    }

    /// Closes the gate and returns every member with the epoch it had when
    /// removed.
    pub fn close(&self) -> Vec<(SpanRef, Epoch)> {
        let mut m = self.lock();
        m.gate = Owner::TERMINATED;
        let mut out = Vec::with_capacity(m.len);
        while let Some(s) = Self::pop_front(&mut m) {
            out.push((s, s.epoch()));
        }
        out
    }

    pub fn gate(&self) -> Owner {
        self.lock().gate
    }

    pub fn len(&self) -> usize {
        self.lock().len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends `span` if the gate still equals `expected_owner` and the span
    /// is still at `expected_epoch`.
    pub fn put(&self, expected_owner: Owner, span: SpanRef, expected_epoch: Epoch) -> bool {
        let mut m = self.lock();
        if m.gate != expected_owner || m.gate == Owner::TERMINATED {
            return false;
        }
        if span.epoch() != expected_epoch {
            return false;
        }
        let h = span.header();
        debug_assert_eq!(h.set_id.load(Ordering::Relaxed), 0, "span already in a set");
        h.link.store(0, Ordering::Relaxed);
        h.set_prev.store(m.tail as u64, Ordering::Relaxed);
        h.set_id.store(self.id, Ordering::Relaxed);
        if m.tail == 0 {
            m.head = span.base();
        } else {
            span_at(m.tail).header().link.store(span.base() as u64, Ordering::Relaxed);
        }
        m.tail = span.base();
        m.len += 1;
        true
    }

    /// Removes the oldest member. The epoch is read under the latch; it is
    /// reusable unless a concurrent reclaim already freed the span.
    pub fn take(&self) -> Option<(SpanRef, Epoch)> {
        let mut m = self.lock();
        Self::pop_front(&mut m).map(|s| (s, s.epoch()))
    }

    /// Unlinks `span` if it is a member.
    pub fn remove(&self, span: SpanRef) -> bool {
        let mut m = self.lock();
        let h = span.header();
        if h.set_id.load(Ordering::Relaxed) != self.id {
            return false;
        }
        let prev = h.set_prev.load(Ordering::Relaxed) as usize;
        let next = h.link.load(Ordering::Relaxed) as usize;
        if prev == 0 {
            m.head = next;
        } else {
            span_at(prev).header().link.store(next as u64, Ordering::Relaxed);
        }
        if next == 0 {
            m.tail = prev;
        } else {
            span_at(next).header().set_prev.store(prev as u64, Ordering::Relaxed);
        }
        h.set_id.store(0, Ordering::Relaxed);
        m.len -= 1;
        true
    }

    fn pop_front(m: &mut Members) -> Option<SpanRef> {
        if m.head == 0 {
            return None;
        }
        let s = span_at(m.head);
        let h = s.header();
        let next = h.link.load(Ordering::Relaxed) as usize;
        m.head = next;
        if next == 0 {
            m.tail = 0;
        } else {
            span_at(next).header().set_prev.store(0, Ordering::Relaxed);
        }
        h.set_id.store(0, Ordering::Relaxed);
        m.len -= 1;
        Some(s)
    }

    /// Members front to back.
    pub fn members(&self) -> Vec<SpanRef> {
        let m = self.lock();
        let mut out = Vec::with_capacity(m.len);
        let mut cur = m.head;
        while cur != 0 {
            let s = span_at(cur);
            out.push(s);
            cur = s.header().link.load(Ordering::Relaxed) as usize;
        }
        out
    }

    /// True if every member is in the reusable state.
    pub fn all_reusable(&self) -> bool {
        self.members().iter().all(|s| s.epoch().is(State::Reusable))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::size_classes::SizeClass;
    use crate::vmem::{SimVm, VirtualMemory, VIRTUAL_SPAN_SIZE};

    struct Fx {
        _vm: SimVm,
        spans: Vec<SpanRef>,
        owner: Owner,
    }

    fn fixture(n: usize) -> Fx {
        let vm = SimVm::default();
        let r = vm.reserve(n * VIRTUAL_SPAN_SIZE).unwrap();
        let owner = Owner::new(1, 3);
        let spans = (0..n)
            .map(|i| {
                let s = unsafe { SpanRef::from_base(r.base + i * VIRTUAL_SPAN_SIZE) };
                s.init_for_class(SizeClass::new(0).unwrap(), owner);
                let e = s.try_transition(s.epoch(), State::Hot).unwrap();
                let e = s.try_transition(e, State::Floating).unwrap();
                s.try_transition(e, State::Reusable).unwrap();
                s
            })
            .collect();
        Fx { _vm: vm, spans, owner }
    }

    #[test]
    fn put_take_fifo() {
        let fx = fixture(3);
        let set = ReusableSet::new(7);
        set.open(fx.owner);
        for s in &fx.spans {
            assert!(set.put(fx.owner, *s, s.epoch()));
        }
        assert_eq!(set.members(), fx.spans);
        assert!(set.all_reusable());
        assert_eq!(set.take().map(|x| x.0), Some(fx.spans[0]));
        assert_eq!(set.len(), 2);
    }

    #[test]
    fn gate_rejects_stale_and_terminated_owners() {
        let fx = fixture(1);
        let s = fx.spans[0];
        let set = ReusableSet::new(1);
        assert!(!set.put(fx.owner, s, s.epoch()), "closed set");
        set.open(Owner::new(2, 3));
        assert!(!set.put(fx.owner, s, s.epoch()), "old generation");
        assert!(set.put(Owner::new(2, 3), s, s.epoch()));
    }

    #[test]
    fn put_rejects_a_changed_epoch() {
        let fx = fixture(1);
        let s = fx.spans[0];
        let set = ReusableSet::new(1);
        set.open(fx.owner);
        let e = s.epoch();
        s.try_transition(e, State::Free).unwrap();
        assert!(!set.put(fx.owner, s, e));
        assert!(set.is_empty());
    }

    #[test]
    fn remove_middle_head_tail_and_missing() {
        let fx = fixture(4);
        let set = ReusableSet::new(9);
        set.open(fx.owner);
        for s in &fx.spans[..3] {
            set.put(fx.owner, *s, s.epoch());
        }
        assert!(!set.remove(fx.spans[3]));
        assert!(set.remove(fx.spans[1]));
        assert_eq!(set.members(), vec![fx.spans[0], fx.spans[2]]);
        assert!(set.remove(fx.spans[2]));
        assert!(set.remove(fx.spans[0]));
        assert!(set.is_empty());
        assert_eq!(set.take(), None);
        assert!(set.put(fx.owner, fx.spans[1], fx.spans[1].epoch()));
        assert_eq!(set.members(), vec![fx.spans[1]]);
    }

    #[test]
    fn remove_after_take_fails() {
        let fx = fixture(1);
        let set = ReusableSet::new(2);
        set.open(fx.owner);
        set.put(fx.owner, fx.spans[0], fx.spans[0].epoch());
        let (s, _) = set.take().unwrap();
        assert!(!set.remove(s));
    }

    #[test]
    fn close_drains_everything() {
        let fx = fixture(3);
        let set = ReusableSet::new(2);
        set.open(fx.owner);
        for s in &fx.spans {
            set.put(fx.owner, *s, s.epoch());
        }
        let drained = set.close();
        assert_eq!(drained.len(), 3);
        assert!(drained.iter().all(|(s, e)| e.is(State::Reusable) && !set.remove(*s)));
        assert_eq!(set.gate(), Owner::TERMINATED);
        assert!(!set.put(fx.owner, fx.spans[0], fx.spans[0].epoch()));
    }
}
