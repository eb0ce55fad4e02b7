use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use spanalloc::span_pool::PoolStackStats;

use crate::error::BenchError;

/// One workload run. Field order is the CSV column order.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunReport {
    pub workload: String,
    pub provider: String,
    pub threads: usize,
    pub rounds: usize,
    pub objects_per_round: usize,
    pub size: String,
    pub seed: u64,
    pub ablate: String,
    pub pool_width: usize,
    pub reuse_percent: u32,
    pub ops: u64,
    pub seconds: f64,
    pub ops_per_second: f64,
    /// Mean and max wall time the workers spent in their loops.
    pub thread_seconds_mean: f64,
    pub thread_seconds_max: f64,
    /// Committed bytes from the provider, or RSS for the os provider.
    pub memory_exact: bool,
    pub baseline_committed_bytes: usize,
    pub peak_committed_bytes: usize,
    pub final_committed_bytes: usize,
    pub frees: u64,
    pub remote_frees: u64,
    pub remote_fraction: f64,
    pub huge_allocs: u64,
    pub pool_fetches: u64,
    pub set_fetches: u64,
    pub reclaimed: u64,
    pub adoptions: u64,
    pub terminations: u64,
    /// Cache lines holding objects of more than one thread.
    pub shared_lines: Option<u64>,
    /// Freed blocks handed back to the thread that freed them.
    pub handed_back: Option<u64>,
    /// Tree-order over list-order traversal time.
    pub locality_ratio: Option<f64>,
    #[serde(skip)]
    pub thread_seconds: Vec<f64>,
    /// Peak committed bytes per prodcons epoch.
    #[serde(skip)]
    pub epoch_peaks: Vec<usize>,
}

pub fn write_csv<W: Write>(out: W, reports: &[RunReport]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Appends `report` to the CSV at `path`, writing the header only when the
/// file is new or empty.
pub fn append_csv(path: &Path, report: &RunReport) -> Result<(), BenchError> {
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let fresh = file.metadata()?.len() == 0;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    w.serialize(report)?;
    w.flush()?;
    Ok(())
}

/// Per-stack span-pool counters as CSV.
pub fn write_pool_stats<W: Write>(out: W, stats: &[PoolStackStats]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["real_span_size", "pool", "len", "pushes", "pops", "retries"])?;
    for s in stats {
        w.write_record([
            s.real_span_size.to_string(),
            s.pool.to_string(),
            s.len.to_string(),
            s.counters.pushes.to_string(),
            s.counters.pops.to_string(),
            s.counters.retries.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
