use std::path::PathBuf;

/// Errors surfaced by the codec, acoustic model, data pipeline and training loop.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("sample rate {got} Hz, expected {expected} Hz")]
    SampleRate { got: u32, expected: u32 },
    #[error("alignment mismatch: {0}")]
    Alignment(String),
    #[error("unknown phoneme `{0}`")]
    UnknownPhoneme(String),
    #[error("phoneme id {id} outside vocabulary of {size}")]
    UnknownPhonemeId { id: usize, size: usize },
    #[error("checkpoint format version {found} is not supported (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error("manifest {path}: {issues}")]
    Manifest { path: PathBuf, issues: ManifestIssues },
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("wav {path}: {source}")]
    Wav { path: PathBuf, source: hound::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every rejected manifest record, with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestIssues(pub Vec<(usize, String)>);

impl std::fmt::Display for ManifestIssues {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, (line, msg)) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            write!(f, "line {line}: {msg}")?;
        }
        Ok(())
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
