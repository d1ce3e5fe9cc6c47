use std::path::PathBuf;

/// Errors produced anywhere in the library.
///
/// Every variant maps onto one of the CLI exit codes through
/// [`Error::exit_code`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {layer}: expected {expected}, got {got}")]
    Dimension { layer: String, expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value at index {index} of {what}")]
    NonFinite { what: String, index: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("stale forward cache: {0}")]
    StaleCache(String),

    #[error("hash mismatch for {what}: expected {expected}, found {found}")]
    HashMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("decode error: {0}")]
    Decode(String),

    #[error("missing feature embedding for sample {0}")]
    MissingFeature(String),

    #[error("seed {seed_id}: {source}")]
    Seed {
        seed_id: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("ensemble member {member}: {source}")]
    Member {
        member: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code: 2 configuration, 3 numeric, 4 cache or hash
    /// mismatch, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Dimension { .. } | Error::NonFinite { .. } | Error::Numeric(_) | Error::Diverged { .. } => 3,
            Error::HashMismatch { .. } | Error::StaleCache(_) => 4,
            Error::Decode(_) | Error::MissingFeature(_) | Error::Io { .. } => 1,
            Error::Seed { source, .. } | Error::Member { source, .. } | Error::Stage { source, .. } => {
                source.exit_code()
            }
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Decode(format!("csv: {e}"))
    }
}
