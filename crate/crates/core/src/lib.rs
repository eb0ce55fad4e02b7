//! A concurrent span-based memory allocator.
//!
//! Memory comes from one large virtual reservation carved into 2MB-aligned
//! virtual spans. Each span holds one real span: a header and a fixed number
//! of equally sized blocks. Threads allocate from per-thread (or per-core)
//! buffers without synchronization on the fast path; frees by other threads
//! go to a lock-free remote list in the span. Empty spans return to a global
//! pool of tagged lock-free stacks, decommitting their payload pages.
//!
//! ```
//! use spanalloc::{Allocator, Config};
//!
//! let mut config = Config::sim();
//! config.arena_bytes = 1 << 30;
//! let a = Allocator::new(config).unwrap();
//! let p = a.alloc(100);
//! assert!(!p.is_null());
//! unsafe { a.dealloc(p) };
//! ```

mod api;
pub mod arena;
pub mod config;
pub mod error;
pub mod fragmeter;
mod frontend;
pub mod reusable_set;
pub mod size_classes;
pub mod span;
pub mod span_pool;
pub mod trace;
pub mod vmem;

pub use api::{Allocator, AllocatorStats, BlockInfo, SpanInfo, MAX_ALIGN};
pub use config::{Config, LabMode, ReclaimMode};
pub use error::{AllocError, ConfigError, VmError};
pub use frontend::{FrontendStats, ThreadCtx};
pub use size_classes::{class_for_size, SizeClass, SizeRoute};
pub use span::{Epoch, Owner, State};
pub use vmem::{ProviderKind, SimVm, VirtualMemory, VmStats};
