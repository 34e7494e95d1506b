use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by how a caller should react: `Config` means the
/// request itself was malformed, `Data` means an input file or stream was
/// unusable, `Schema` means two artifacts disagree about the feature layout,
/// and `MissingDependency` names the pipeline stage that has to run first.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("schema mismatch: expected fingerprint {expected}, found {found}")]
    SchemaMismatch { expected: String, found: String },

    #[error("missing artifact {artifact:?}: run `{producer}` first")]
    MissingDependency { artifact: String, producer: String },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
