//! Running count of span-internal fragmentation.
//!
//! `f` is the number of free payload bytes summed over every span that is
//! not in the pool. It changes by closed-form amounts on each operation:
//!
//! | event                                   | update          |
//! |-----------------------------------------|-----------------|
//! | allocation that had to fetch a new span | `f += u - size` |
//! | any other allocation                    | `f -= size`     |
//! | free that empties its span              | `f -= u - size` |
//! | any other free                          | `f += size`     |
//! | span emptied outside a free, pooled     | `f -= u`        |
//!
//! where `size` is the block size and `u` the span's payload bytes.

use std::io::{self, Write};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LedgerOp {
    Alloc,
    Free,
    Reclaim,
}

impl LedgerOp {
    fn name(self) -> &'static str {
        match self {
            LedgerOp::Alloc => "alloc",
            LedgerOp::Free => "free",
            LedgerOp::Reclaim => "reclaim",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LedgerEvent {
    pub op: LedgerOp,
    pub block_size: usize,
    /// New span fetched (allocations) or span emptied (frees).
    pub boundary: bool,
    pub f_after: i64,
}

#[derive(Debug, Clone)]
pub struct FragLedger {
    f: i64,
    events: Vec<LedgerEvent>,
    event_cap: usize,
    dropped: u64,
}

impl Default for FragLedger {
    fn default() -> Self {
        FragLedger::with_event_cap(1 << 20)
    }
}

impl FragLedger {
    pub fn with_event_cap(event_cap: usize) -> Self {
        FragLedger { f: 0, events: Vec::new(), event_cap, dropped: 0 }
    }

    pub fn f(&self) -> i64 {
        self.f
    }

    fn log(&mut self, op: LedgerOp, block_size: usize, boundary: bool) -> i64 {
        if self.events.len() < self.event_cap {
            self.events.push(LedgerEvent { op, block_size, boundary, f_after: self.f });
        } else {
            self.dropped += 1;
        }
        self.f
    }

    pub fn on_alloc(&mut self, fetched_span: bool, size: usize, u: usize) -> i64 {
        if fetched_span {
            self.f += u as i64 - size as i64;
        } else {
            self.f -= size as i64;
        }
        self.log(LedgerOp::Alloc, size, fetched_span)
    }

    pub fn on_free(&mut self, last_block: bool, size: usize, u: usize) -> i64 {
        if last_block {
            self.f -= u as i64 - size as i64;
        } else {
            self.f += size as i64;
        }
        self.log(LedgerOp::Free, size, last_block)
    }

    /// A span found empty by something other than a free (thread exit,
    /// retiring an exhausted hot span) went back to the pool.
    pub fn on_span_reclaimed(&mut self, size: usize, u: usize) -> i64 {
        self.f -= u as i64;
        self.log(LedgerOp::Reclaim, size, true)
    }

    pub fn events(&self) -> &[LedgerEvent] {
        &self.events
    }

    /// Events not logged because the log was full.
    pub fn dropped_events(&self) -> u64 {
        self.dropped
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "seq,op,block_size,boundary,f")?;
        for (i, e) in self.events.iter().enumerate() {
            writeln!(out, "{},{},{},{},{}", i, e.op.name(), e.block_size, e.boundary as u8, e.f_after)?;
        }
        Ok(())
    }
}
