//! Crate-wide error type.

/// Errors surfaced by the public API.
///
/// Shape bugs internal to the autodiff tape are programming errors and panic
/// instead; these variants cover contract violations a caller can actually
/// trigger or needs to handle.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration (bad geometry, missing file, inconsistent params).
    #[error("config error: {0}")]
    Config(String),

    /// A precondition between modules was violated (e.g. trace/config mismatch).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A mathematically undefined request (e.g. flops_max <= flops_min).
    #[error("domain error: {0}")]
    Domain(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss ({value}) at iteration {iteration}")]
    NonFinite { iteration: usize, value: f64 },

    /// Dataset ingestion failure.
    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn dataset(msg: impl Into<String>) -> Self {
        Error::Dataset(msg.into())
    }
}
