use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },

    /// A zero vector was passed where a direction is required. `row` is set
    /// when the vector came from a matrix.
    #[error("zero vector{}", .row.map(|r| format!(" at row {r}")).unwrap_or_default())]
    ZeroVector { row: Option<usize> },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("too few items: species {species} has {available} {kind} rows, need at least {required}")]
    TooFewItems {
        species: u32,
        kind: &'static str,
        available: usize,
        required: usize,
    },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("no relevant items in ranking")]
    NoRelevantItems,

    #[error("empty gallery")]
    EmptyGallery,

    #[error("k = {k} exceeds the {available} available reference items")]
    KTooLarge { k: usize, available: usize },

    #[error("no prototype for species {species}")]
    MissingPrototype { species: u32 },

    #[error("species lists differ between the two text sets")]
    SpeciesMismatch,

    #[error("bad magic bytes {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("unknown modality code {0}")]
    UnknownModality(u8),

    #[error("payload too short: expected {expected} bytes, found {actual}")]
    PayloadTooShort { expected: u64, actual: u64 },

    #[error("payload too long: expected {expected} bytes, found {actual}")]
    PayloadTooLong { expected: u64, actual: u64 },

    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },

    #[error("line {line}: bad value for `{key}`: {message}")]
    TypeError {
        line: usize,
        key: String,
        message: String,
    },

    #[error("config hash mismatch for {path}: artifact has {found}, config has {expected}")]
    ProvenanceMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
