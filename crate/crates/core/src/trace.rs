//! Recorded span state transitions and their validation.

use std::collections::BTreeMap;
use std::fmt;

use crate::span::{is_legal_edge, Epoch, State};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub span: usize,
    pub from: Epoch,
    pub to: Epoch,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceViolation {
    IllegalEdge { span: usize, from: Option<State>, to: Option<State> },
    CounterSkip { span: usize, from: u64, to: u64 },
    Discontinuity { span: usize, expected: Epoch, found: Epoch },
    BadStart { span: usize, first: Epoch },
}

impl fmt::Display for TraceViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceViolation::IllegalEdge { span, from, to } => {
                write!(f, "span {span:#x}: illegal edge {from:?} -> {to:?}")
            }
            TraceViolation::CounterSkip { span, from, to } => {
                write!(f, "span {span:#x}: counter {from} -> {to}")
            }
            TraceViolation::Discontinuity { span, expected, found } => {
                write!(f, "span {span:#x}: expected {expected:?}, transition starts at {found:?}")
            }
            TraceViolation::BadStart { span, first } => {
                write!(f, "span {span:#x}: history starts at {first:?}")
            }
        }
    }
}

/// Checks that every span's history is a chain of legal edges, each bumping
/// the counter by one and starting where the previous one ended. Records may
/// arrive in any order; counters give the per-span order.
pub fn validate(records: &[Transition]) -> Vec<TraceViolation> {
    let mut per_span: BTreeMap<usize, Vec<Transition>> = BTreeMap::new();
    for r in records {
        per_span.entry(r.span).or_default().push(*r);
    }
    let mut out = Vec::new();
    for (span, mut hist) in per_span {
        hist.sort_by_key(|t| t.to.counter());
        let first = hist[0].from;
        if first != Epoch::new(State::Free, 0) {
            out.push(TraceViolation::BadStart { span, first });
        }
        let mut prev: Option<Epoch> = None;
        for t in hist {
            let (from, to) = (t.from.state(), t.to.state());
            let legal = matches!((from, to), (Some(a), Some(b)) if is_legal_edge(a, b));
            if !legal {
                out.push(TraceViolation::IllegalEdge { span, from, to });
            }
            if t.to.counter() != t.from.counter().wrapping_add(1) {
                out.push(TraceViolation::CounterSkip {
                    span,
                    from: t.from.counter(),
                    to: t.to.counter(),
                });
            }
            if let Some(p) = prev {
                if p != t.from {
                    out.push(TraceViolation::Discontinuity { span, expected: p, found: t.from });
                }
            }
            prev = Some(t.to);
        }
    }
    out
}

/// Per-state-pair transition counts, for reports.
pub fn edge_histogram(records: &[Transition]) -> BTreeMap<(State, State), usize> {
    let mut out = BTreeMap::new();
    for r in records {
        if let (Some(a), Some(b)) = (r.from.state(), r.to.state()) {
            *out.entry((a, b)).or_insert(0) += 1;
        }
    }
    out
}
