use thiserror::Error;

/// Failures reported by a virtual-memory provider.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VmError {
    #[error("failed to reserve {len} bytes of address space (errno {errno})")]
    ReserveFailed { len: usize, errno: i32 },
    #[error("length {len} is not a positive multiple of {granule}")]
    BadLength { len: usize, granule: usize },
    #[error("range {base:#x}+{len:#x} is not page aligned")]
    Misaligned { base: usize, len: usize },
    #[error("range {base:#x}+{len:#x} lies outside every reserved region")]
    OutOfRange { base: usize, len: usize },
    #[error("reservation cap of {cap} bytes exceeded")]
    CapExceeded { cap: usize },
    #[error("guard pages are not supported by this provider")]
    GuardUnsupported,
    #[error("access to guarded address {addr:#x}")]
    GuardFault { addr: usize },
}

/// Failures surfaced by the allocator.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AllocError {
    #[error("arena exhausted after {spans} virtual spans")]
    ArenaExhausted { spans: usize },
    #[error("no free local allocation buffer (limit {limit})")]
    TooManyThreads { limit: usize },
    #[error("alignment {align} is not a power of two no larger than 4096")]
    BadAlignment { align: usize },
    #[error("huge-object header at {addr:#x} has bad magic {found:#x}")]
    BadHugeHeader { addr: usize, found: u64 },
    #[error("request of {size} bytes is too large")]
    TooLarge { size: usize },
    #[error("thread-local state for this allocator is unavailable")]
    Detached,
    #[error(transparent)]
    Vm(#[from] VmError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Rejected configuration values.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("invalid value {value:?} for {key}")]
    Invalid { key: &'static str, value: String },
}
