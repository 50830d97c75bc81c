use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid noise schedule: {0}")]
    Schedule(String),
    #[error("timestep {t} out of range {min}..={max}")]
    Timestep { t: usize, min: usize, max: usize },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate covariance: requested {requested} components but covariance rank is {rank}")]
    DegenerateCovariance { requested: usize, rank: usize },
    #[error("unknown attribute {name:?}; available: {available:?}")]
    UnknownAttribute { name: String, available: Vec<String> },
    #[error("attribute {attribute:?} has no {class} rows")]
    EmptyClass { attribute: String, class: &'static str },
    #[error("blank image: no detectable foreground")]
    BlankImage,
    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: u64, value: f64 },
    #[error("embedding file: {0}")]
    Format(#[from] FormatError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("image: {0}")]
    Image(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}

/// Decoding failures for RCDE embedding files, one variant per failure mode.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated payload: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("header dim {header} does not match trailer dim {trailer}")]
    DimMismatch { header: usize, trailer: usize },
    #[error("malformed trailer: {0}")]
    Trailer(String),
    #[error("label column {attribute:?} has {got} values for {rows} rows")]
    LabelLength { attribute: String, got: usize, rows: usize },
    #[error("{0} trailing bytes after trailer")]
    TrailingBytes(usize),
}

impl FormatError {
    /// Stable numeric code per failure mode.
    pub fn code(&self) -> u32 {
        match self {
            Self::BadMagic(_) => 1,
            Self::UnsupportedVersion(_) => 2,
            Self::Truncated { .. } => 3,
            Self::DimMismatch { .. } => 4,
            Self::Trailer(_) => 5,
            Self::LabelLength { .. } => 6,
            Self::TrailingBytes(_) => 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("format version {found:?} is not supported (expected {expected:?})")]
    VersionMismatch { found: String, expected: String },
    #[error("corrupted payload: {0}")]
    Corrupted(String),
}
