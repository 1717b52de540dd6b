use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("I - W is singular (|det| = {det:e})")]
    Singular { det: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parameters are not stationary (operator norm {norm:.6} >= 1)")]
    NonStationary { norm: f64 },

    #[error("numerical failure: {message}")]
    Numerical { message: String, trace: Vec<f64> },

    #[error("initialization failed: {0}")]
    Initialization(String),

    #[error("grid search failed: every penalty triple failed ({0})")]
    Search(String),

    #[error("{failed} of {total} replications failed (limit 10%); first failure: {first}")]
    Replications { failed: usize, total: usize, first: String },

    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error("finite-difference evaluation failed at coordinate {coordinate}: {message}")]
    Stencil { coordinate: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
