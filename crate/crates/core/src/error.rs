use thiserror::Error;

/// Errors surfaced by fallible library operations. Shape violations in the
/// numeric kernels panic instead; these variants cover validation, solver
/// failures and (de)serialization.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("matrix is not positive definite: leading minor failed at pivot {pivot}")]
    NotPositiveDefinite { pivot: usize },

    #[error("layer file schema version {found} is not supported (expected {expected})")]
    SchemaVersion { expected: u32, found: u32 },

    #[error("malformed layer document: {0}")]
    MalformedLayer(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
