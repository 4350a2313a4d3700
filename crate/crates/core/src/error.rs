use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("dimension mismatch: layer {layer} has dim {found}, expected {expected}")]
    DimensionMismatch {
        layer: usize,
        expected: usize,
        found: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no sensitive features to assess")]
    NoSensitiveFeatures,

    #[error("missing prototype embedding for concept '{0}'")]
    MissingPrototype(String),

    #[error(
        "requested {requested} sensitive vectors in layer {layer}, which has only {available}"
    )]
    SizeOverflow {
        layer: usize,
        requested: usize,
        available: usize,
    },

    #[error("design matrix is rank deficient (rank {rank} < {cols} columns)")]
    RankDeficient { rank: usize, cols: usize },

    #[error("all residuals are zero; the noise scale estimate is degenerate")]
    ZeroResiduals,

    #[error("malformed manifest: {0}")]
    MalformedManifest(String),

    #[error("unsupported format version '{0}'")]
    UnsupportedVersion(String),

    #[error("truncated payload in layer {layer}: need {needed} bytes at offset {offset}, payload has {available}")]
    TruncatedPayload {
        layer: usize,
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Everything but configuration errors. The CLI exits with 2 for these
    /// and 1 for configuration (usage) errors.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
