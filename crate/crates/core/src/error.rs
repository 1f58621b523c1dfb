use std::path::PathBuf;

use crate::inversion::RunManifest;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// The loss went non-finite. Carries the manifest recorded up to the failing step.
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFinite {
        iteration: usize,
        detail: String,
        manifest: Box<RunManifest>,
    },

    #[error("encoder `{encoder_id}` failed at iteration {iteration}: {source}")]
    EncoderAtIteration {
        encoder_id: String,
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown encoder `{id}`; known encoders: {}", known.join(", "))]
    UnknownEncoder { id: String, known: Vec<String> },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("unavailable: {0}")]
    Availability(String),

    #[error("failed to ingest `{}`: {source}", path.display())]
    Ingestion {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("prompt {index} rejected by tokenizer: {reason}")]
    Tokenizer { index: usize, reason: String },

    #[error("io error on `{}`: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png encoding: {0}")]
    PngEncode(#[from] png::EncodingError),

    #[error("png decoding: {0}")]
    PngDecode(#[from] png::DecodingError),

    /// The archive was written but some runs or cells failed.
    #[error("{failed} of {total} runs failed; partial results archived in `{}`", archive.display())]
    PartialFailure {
        archive: PathBuf,
        failed: usize,
        total: usize,
    },

    #[error("audit failed: every one of {n_runs} runs errored; first error: {first}")]
    AuditFailed { n_runs: usize, first: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
