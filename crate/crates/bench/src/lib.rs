//! Workload harness for `spanalloc`.
//!
//! Each workload spawns its own worker threads against one allocator and
//! returns a [`RunReport`] with throughput, committed memory, and allocator
//! counters. Reports serialize to CSV with a fixed column order.
//!
//! ```no_run
//! use spanalloc_bench::{run, Workload, WorkloadConfig};
//!
//! let mut cfg = WorkloadConfig::new(Workload::Threadtest, 4);
//! cfg.rounds = 10;
//! let report = run(&cfg).unwrap();
//! println!("{:.0} ops/s", report.ops_per_second);
//! ```

pub mod config;
pub mod error;
pub mod memory;
pub mod observer;
pub mod report;
pub mod workloads;

pub use config::{ablate, Ablations, SizeSpec, Workload, WorkloadConfig};
pub use error::BenchError;
pub use memory::MemSampler;
pub use observer::{IntervalChecker, NoObserver, Observer, OpLog};
pub use report::{append_csv, write_csv, write_pool_stats, RunReport};
pub use workloads::{run, run_on, sweep_intervals};
