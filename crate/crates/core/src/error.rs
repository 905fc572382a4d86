use thiserror::Error;

/// Errors raised by the simulation, fitting and optimization modules.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SgiError {
    /// An input lies outside the domain of a physical model
    /// (field point inside a wire, invalid spin label, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// Inconsistent or invalid configuration (negative durations, bad scheme parameters).
    #[error("configuration error: {0}")]
    Config(String),
    /// The requested operation is not available for the given model.
    #[error("unsupported: {0}")]
    Unsupported(String),
    /// A numerical procedure failed to produce a usable answer.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, SgiError>;
