use thiserror::Error;

/// Errors shared by every subsystem of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("rejection sampler exceeded {0} rounds (packing fraction too high or bound too loose)")]
    RejectionCap(u64),
    #[error("event-driven run exceeded {0} events")]
    EventCap(u64),
    #[error("cap violation in module {module}: {what}")]
    CapViolation { module: &'static str, what: String },
    #[error("grid solver unstable: norm grew by a factor {0:.2}")]
    Unstable(f64),
    #[error("malformed collision history: {0}")]
    BadHistory(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
