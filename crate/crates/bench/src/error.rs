use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid workload configuration: {0}")]
    Invalid(String),
    #[error("unknown ablation flag {0:?}")]
    UnknownAblation(String),
    #[error("allocation of {size} bytes failed")]
    OutOfMemory { size: usize },
    #[error(transparent)]
    Alloc(#[from] spanalloc::AllocError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
