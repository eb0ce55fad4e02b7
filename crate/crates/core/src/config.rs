use std::fmt;
use std::str::FromStr;

use crate::error::ConfigError;
use crate::vmem::{ProviderKind, PAGE_SIZE, VIRTUAL_SPAN_SIZE};

/// How threads map to local allocation buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabMode {
    /// One buffer per thread.
    Thread,
    /// Threads share the buffer of their ordinal modulo the core count.
    Core,
}

impl FromStr for LabMode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tlab" | "thread" => Ok(LabMode::Thread),
            "clab" | "core" => Ok(LabMode::Core),
            _ => Err(ConfigError::Invalid { key: "lab_mode", value: s.to_string() }),
        }
    }
}

impl fmt::Display for LabMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabMode::Thread => "tlab",
            LabMode::Core => "clab",
        })
    }
}

/// When empty spans go back to the span pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReclaimMode {
    /// On the free that empties the span.
    Eager,
    /// Parked with the owning buffer until its next slow-path allocation.
    Lazy,
}

impl FromStr for ReclaimMode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "eager" => Ok(ReclaimMode::Eager),
            "lazy" => Ok(ReclaimMode::Lazy),
            _ => Err(ConfigError::Invalid { key: "reclaim", value: s.to_string() }),
        }
    }
}

impl fmt::Display for ReclaimMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReclaimMode::Eager => "eager",
            ReclaimMode::Lazy => "lazy",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    pub arena_bytes: usize,
    pub provider: ProviderKind,
    pub guard_pages: bool,
    /// Stacks per real-span size in the span pool.
    pub pool_width: usize,
    pub decommit: bool,
    /// Real spans strictly larger than this are decommitted when pooled.
    pub decommit_threshold: usize,
    /// A floating span becomes reusable once more than this percentage of
    /// its blocks is free.
    pub reuse_percent: u32,
    pub lab_mode: LabMode,
    pub reclaim: ReclaimMode,
    pub max_labs: usize,
    /// Keep the fragmentation ledger (needs the `instrument` feature).
    pub frag_ledger: bool,
    /// Record every span state transition (needs the `instrument` feature).
    pub trace_transitions: bool,
}

pub fn available_cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl Default for Config {
    fn default() -> Self {
        Config {
            arena_bytes: 1 << 35,
            provider: ProviderKind::Os,
            guard_pages: false,
            pool_width: available_cores(),
            decommit: true,
            decommit_threshold: 32 * 1024,
            reuse_percent: 80,
            lab_mode: LabMode::Thread,
            reclaim: ReclaimMode::Eager,
            max_labs: 1024,
            frag_ledger: false,
            trace_transitions: false,
        }
    }
}

fn parse<T: FromStr>(key: &'static str, value: &str) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::Invalid { key, value: value.to_string() })
}

fn parse_flag(key: &'static str, value: &str) -> Result<bool, ConfigError> {
    match value.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(ConfigError::Invalid { key, value: value.to_string() }),
    }
}

impl Config {
    /// Simulated provider with page accounting; what the tests use.
    pub fn sim() -> Self {
        Config { provider: ProviderKind::Sim, ..Config::default() }
    }

    /// Defaults overridden by `SPANALLOC_*` environment variables.
    pub fn from_env() -> Result<Self, ConfigError> {
        Config::default().with_vars(std::env::vars())
    }

    pub fn with_vars<I, K, V>(mut self, vars: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (k, v) in vars {
            let v = v.as_ref();
            match k.as_ref() {
                "SPANALLOC_ARENA_BYTES" => self.arena_bytes = parse("arena_bytes", v)?,
                "SPANALLOC_PROVIDER" => {
                    self.provider = v.parse().map_err(|_| ConfigError::Invalid {
                        key: "provider",
                        value: v.to_string(),
                    })?
                }
                "SPANALLOC_GUARD_PAGES" => self.guard_pages = parse_flag("guard_pages", v)?,
                "SPANALLOC_POOL_WIDTH" => self.pool_width = parse("pool_width", v)?,
                "SPANALLOC_DECOMMIT" => self.decommit = parse_flag("decommit", v)?,
                "SPANALLOC_DECOMMIT_THRESHOLD" => {
                    self.decommit_threshold = parse("decommit_threshold", v)?
                }
                "SPANALLOC_REUSE_PERCENT" => self.reuse_percent = parse("reuse_percent", v)?,
                "SPANALLOC_LAB_MODE" => self.lab_mode = v.parse()?,
                "SPANALLOC_RECLAIM" => self.reclaim = v.parse()?,
                "SPANALLOC_MAX_LABS" => self.max_labs = parse("max_labs", v)?,
                _ => {}
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key, value: String| Err(ConfigError::Invalid { key, value });
        if self.arena_bytes == 0 || self.arena_bytes % VIRTUAL_SPAN_SIZE != 0 {
            return bad("arena_bytes", self.arena_bytes.to_string());
        }
        if self.pool_width == 0 {
            return bad("pool_width", "0".into());
        }
        if self.reuse_percent > 100 {
            return bad("reuse_percent", self.reuse_percent.to_string());
        }
        if self.decommit_threshold % PAGE_SIZE != 0 {
            return bad("decommit_threshold", self.decommit_threshold.to_string());
        }
        if self.max_labs == 0 || self.max_labs >= 1 << 24 {
            return bad("max_labs", self.max_labs.to_string());
        }
        Ok(())
    }
}
