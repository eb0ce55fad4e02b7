use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::Parser;
use spanalloc::size_classes::table_csv;
use spanalloc::{Allocator, LabMode, ProviderKind};
use spanalloc_bench::{append_csv, run_on, write_csv, write_pool_stats, Ablations, NoObserver, SizeSpec, Workload, WorkloadConfig};

/// Runs one allocator workload and reports throughput and memory.
#[derive(Debug, Parser)]
#[command(name = "bench", version)]
struct Args {
    #[arg(long, value_parser = parse_workload, default_value = "threadtest")]
    workload: Workload,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Defaults depend on the workload.
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    objects: Option<usize>,
    /// Object size in bytes, or an inclusive range such as `1-8`.
    #[arg(long, value_parser = parse_size)]
    size: Option<SizeSpec>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Seconds for larson_like; otherwise a fixed operation count is used.
    #[arg(long)]
    duration: Option<f64>,
    /// prodcons: number of producer threads; the rest consume.
    #[arg(long)]
    producers: Option<usize>,
    /// Append the report to this CSV file.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Comma-separated: no_decommit, pool_width_1, lazy_reclaim.
    #[arg(long, value_parser = parse_ablate, default_value = "none")]
    ablate: Ablations,
    #[arg(long, value_parser = parse_provider, default_value = "os")]
    provider: ProviderKind,
    #[arg(long)]
    pool_width: Option<usize>,
    /// Percentage of free blocks that makes a span reusable.
    #[arg(long)]
    reuse_threshold: Option<u32>,
    /// Share one buffer per core instead of one per thread.
    #[arg(long)]
    clab: bool,
    /// Print the size-class table as CSV and exit.
    #[arg(long)]
    dump_size_classes: bool,
    /// Write the fragmentation ledger events here (needs the `ledger` feature).
    #[arg(long)]
    ledger_csv: Option<PathBuf>,
    /// Write per-stack span-pool counters here.
    #[arg(long)]
    pool_stats: Option<PathBuf>,
}

fn parse_workload(s: &str) -> Result<Workload, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_size(s: &str) -> Result<SizeSpec, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_ablate(s: &str) -> Result<Ablations, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_provider(s: &str) -> Result<ProviderKind, String> {
    s.parse()
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    if args.dump_size_classes {
        print!("{}", table_csv());
        return Ok(());
    }

    let mut cfg = WorkloadConfig::new(args.workload, args.threads);
    if let Some(r) = args.rounds {
        cfg.rounds = r;
    }
    if let Some(o) = args.objects {
        cfg.objects_per_round = o;
    }
    if let Some(s) = args.size {
        cfg.size = s;
    }
    cfg.seed = args.seed;
    cfg.duration = args.duration.map(std::time::Duration::from_secs_f64);
    cfg.producers = args.producers;
    cfg.provider = args.provider;
    cfg.pool_width = args.pool_width;
    cfg.reuse_percent = args.reuse_threshold;
    cfg.ablate = args.ablate;
    if args.clab {
        cfg.lab_mode = LabMode::Core;
    }
    cfg.validate()?;

    let mut config = cfg.allocator_config();
    if args.ledger_csv.is_some() {
        if !cfg!(feature = "ledger") {
            bail!("--ledger-csv needs a build with the `ledger` feature");
        }
        config.frag_ledger = true;
    }
    let alloc = Allocator::new(config).context("building allocator")?;
    let report = run_on(&alloc, &cfg, &NoObserver)?;

    let stdout = std::io::stdout();
    write_csv(stdout.lock(), std::slice::from_ref(&report))?;
    if let Some(path) = &args.csv {
        append_csv(path, &report).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &args.pool_stats {
        let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_pool_stats(f, &alloc.pool_stats())?;
    }
    if let Some(path) = &args.ledger_csv {
        write_ledger(&alloc, path)?;
    }
    std::io::stdout().flush()?;
    Ok(())
}

#[cfg(feature = "ledger")]
fn write_ledger(alloc: &Allocator, path: &std::path::Path) -> anyhow::Result<()> {
    let ledger = alloc.frag_ledger().context("ledger was not enabled")?;
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    ledger.write_csv(std::io::BufWriter::new(f))?;
    Ok(())
}

#[cfg(not(feature = "ledger"))]
fn write_ledger(_alloc: &Allocator, _path: &std::path::Path) -> anyhow::Result<()> {
    bail!("--ledger-csv needs a build with the `ledger` feature")
}
