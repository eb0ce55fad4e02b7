use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use rand::Rng;
use spanalloc::{Allocator, Config, LabMode, ProviderKind, ReclaimMode};

use crate::error::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Workload {
    Threadtest,
    ShbenchLike,
    LarsonLike,
    Prodcons,
    Sizesweep,
    FalseshareActive,
    FalsesharePassive,
    Locality,
}

impl Workload {
    pub const ALL: [Workload; 8] = [
        Workload::Threadtest,
        Workload::ShbenchLike,
        Workload::LarsonLike,
        Workload::Prodcons,
        Workload::Sizesweep,
        Workload::FalseshareActive,
        Workload::FalsesharePassive,
        Workload::Locality,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Workload::Threadtest => "threadtest",
            Workload::ShbenchLike => "shbench_like",
            Workload::LarsonLike => "larson_like",
            Workload::Prodcons => "prodcons",
            Workload::Sizesweep => "sizesweep",
            Workload::FalseshareActive => "falseshare_active",
            Workload::FalsesharePassive => "falseshare_passive",
            Workload::Locality => "locality",
        }
    }
}

impl fmt::Display for Workload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Workload {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Workload::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| BenchError::Invalid(format!("unknown workload {s:?}")))
    }
}

/// Object sizes: one fixed size, or uniform over an inclusive range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeSpec {
    Fixed(usize),
    Range(usize, usize),
}

impl SizeSpec {
    pub fn sample<R: Rng>(self, rng: &mut R) -> usize {
        match self {
            SizeSpec::Fixed(n) => n,
            SizeSpec::Range(lo, hi) => rng.gen_range(lo..=hi),
        }
    }

    pub fn max(self) -> usize {
        match self {
            SizeSpec::Fixed(n) | SizeSpec::Range(_, n) => n,
        }
    }
}

impl fmt::Display for SizeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SizeSpec::Fixed(n) => write!(f, "{n}"),
            SizeSpec::Range(lo, hi) => write!(f, "{lo}-{hi}"),
        }
    }
}

impl FromStr for SizeSpec {
    type Err = BenchError;

    /// `64` or `1-8`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || BenchError::Invalid(format!("bad size {s:?}"));
        let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
        match s.split_once('-') {
            Some((lo, hi)) => {
                let (lo, hi) = (num(lo)?, num(hi)?);
                if lo > hi {
                    return Err(bad());
                }
                Ok(SizeSpec::Range(lo, hi))
            }
            None => Ok(SizeSpec::Fixed(num(s)?)),
        }
    }
}

/// Design-decision switches that turn parts of the allocator off.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablations {
    /// Pooled spans keep their pages.
    pub no_decommit: bool,
    /// One span-pool stack per real-span size.
    pub pool_width_1: bool,
    /// Empty spans wait for their owner's next slow-path allocation.
    pub lazy_reclaim: bool,
}

impl Ablations {
    pub fn apply(self, config: &mut Config) {
        if self.no_decommit {
            config.decommit = false;
        }
        if self.pool_width_1 {
            config.pool_width = 1;
        }
        if self.lazy_reclaim {
            config.reclaim = ReclaimMode::Lazy;
        }
    }

    pub fn is_empty(self) -> bool {
        self == Ablations::default()
    }
}

impl fmt::Display for Ablations {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.no_decommit, "no_decommit"),
            (self.pool_width_1, "pool_width_1"),
            (self.lazy_reclaim, "lazy_reclaim"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join("+"))
        }
    }
}

impl FromStr for Ablations {
    type Err = BenchError;

    /// Comma- or plus-separated flag names; `none` or empty for no flags.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = Ablations::default();
        for flag in s.split([',', '+']).map(str::trim).filter(|f| !f.is_empty()) {
            match flag {
                "none" => {}
                "no_decommit" => out.no_decommit = true,
                "pool_width_1" => out.pool_width_1 = true,
                "lazy_reclaim" => out.lazy_reclaim = true,
                other => return Err(BenchError::UnknownAblation(other.to_string())),
            }
        }
        Ok(out)
    }
}

/// An allocator built from `config` with `flags` applied on top.
pub fn ablate(flags: Ablations, mut config: Config) -> Result<Allocator, BenchError> {
    flags.apply(&mut config);
    Ok(Allocator::new(config)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadConfig {
    pub workload: Workload,
    pub threads: usize,
    /// Rounds per thread; hand-offs for larson_like, epochs for prodcons,
    /// rounds per size interval for sizesweep, traversals for locality.
    pub rounds: usize,
    /// Objects each thread allocates per round (the set size for
    /// larson_like).
    pub objects_per_round: usize,
    pub size: SizeSpec,
    /// Wall-clock budget for larson_like, split evenly over hand-offs.
    /// Without it every hand-off performs a fixed operation count.
    pub duration: Option<Duration>,
    pub seed: u64,
    /// prodcons only: threads `0..p` produce and the rest consume. Without
    /// it every thread does both.
    pub producers: Option<usize>,
    pub provider: ProviderKind,
    pub pool_width: Option<usize>,
    pub reuse_percent: Option<u32>,
    pub lab_mode: LabMode,
    pub arena_bytes: usize,
    pub ablate: Ablations,
}

impl WorkloadConfig {
    /// Desk-scale defaults for `workload`.
    pub fn new(workload: Workload, threads: usize) -> Self {
        let threads = threads.max(1);
        let (rounds, objects, size) = match workload {
            Workload::Threadtest => (1000, 100_000 / threads, SizeSpec::Fixed(64)),
            Workload::ShbenchLike => (1000, 1000, SizeSpec::Range(1, 8)),
            Workload::LarsonLike => (8, 1000, SizeSpec::Range(8, 128)),
            Workload::Prodcons => (100, 10_000, SizeSpec::Fixed(64)),
            Workload::Sizesweep => (10, 100, SizeSpec::Range(16, 4 << 20)),
            Workload::FalseshareActive | Workload::FalsesharePassive => {
                (10_000, 100, SizeSpec::Fixed(8))
            }
            Workload::Locality => (10, 100_000, SizeSpec::Fixed(32)),
        };
        WorkloadConfig {
            workload,
            threads,
            rounds,
            objects_per_round: objects.max(1),
            size,
            duration: None,
            seed: 42,
            producers: None,
            provider: ProviderKind::Os,
            pool_width: None,
            reuse_percent: None,
            lab_mode: LabMode::Thread,
            arena_bytes: 1 << 35,
            ablate: Ablations::default(),
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Invalid(m));
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        if self.rounds == 0 || self.objects_per_round == 0 {
            return bad("rounds and objects per round must be positive".into());
        }
        if self.workload == Workload::FalsesharePassive && self.threads < 2 {
            return bad("falseshare_passive needs at least 2 threads".into());
        }
        if let Some(p) = self.producers {
            if p == 0 || p >= self.threads {
                return bad(format!("producers must be in 1..{}", self.threads));
            }
        }
        if self.workload == Workload::Locality && self.size.max() < 32 {
            return bad("locality nodes need at least 32 bytes".into());
        }
        Ok(())
    }

    /// Allocator configuration, ablations included.
    pub fn allocator_config(&self) -> Config {
        let mut c = Config {
            provider: self.provider,
            arena_bytes: self.arena_bytes,
            lab_mode: self.lab_mode,
            ..Config::default()
        };
        if let Some(p) = self.pool_width {
            c.pool_width = p;
        }
        if let Some(r) = self.reuse_percent {
            c.reuse_percent = r;
        }
        self.ablate.apply(&mut c);
        c
    }
}
