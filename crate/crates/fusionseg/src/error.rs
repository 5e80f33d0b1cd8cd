//! Crate-wide error type. Shape errors are hard failures: the published
//! architectures must be verified, never silently coerced.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("convolution output size is not integral: (M={m} - F'={f_eff} + 2P={p}) not divisible by S={s}")]
    NonIntegralOutput { m: usize, f_eff: usize, p: usize, s: usize },
    #[error("negative output size: {0}")]
    NegativeOutput(String),
    #[error("max pooling requires even spatial dims, got {h}x{w}")]
    OddSpatialDim { h: usize, w: usize },
    #[error("batch norm needs at least 2 samples per channel, got {0}")]
    DegenerateBatch(usize),
    #[error("missing forward state: {0}")]
    MissingForwardState(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },
    #[error("all pixels carry the ignore label; loss undefined")]
    AllPixelsIgnored,
    #[error("epoch {t} out of range [0, {num_epochs})")]
    EpochOutOfRange { t: usize, num_epochs: usize },
    #[error("unknown network '{0}' (expected cloudsnet, fcn_vnir, or fcn_swir)")]
    UnknownNetwork(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("empty raster")]
    EmptyRaster,
    #[error("scene too small: {0}")]
    SceneTooSmall(String),
    #[error("zero standard deviation for band {0}; normalization undefined")]
    ZeroStd(usize),
    #[error("class fractions must sum to ~1, got {0}")]
    InvalidFractions(f64),
    #[error("format error at byte offset {offset}: {message}")]
    FormatError { offset: u64, message: String },
    #[error("empty confusion matrix")]
    EmptyMatrix,
    #[error("degenerate training data: {0}")]
    DegenerateData(String),
    #[error("raster has {found} bands, model expects {expected}")]
    BandCountMismatch { expected: usize, found: usize },
    #[error("non-finite value detected: {0}")]
    NonFinite(String),
    #[error("invalid layer token '{0}'")]
    BadLayerToken(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("json error on {path}: {source}")]
    Json { path: String, source: serde_json::Error },
}

impl Error {
    /// Stable process exit code: 1 usage, 2 data error, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) | Error::DegenerateBatch(_) => 3,
            Error::UnknownNetwork(_) | Error::Config(_) => 1,
            _ => 2,
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io { path: path.display().to_string(), source }
    }

    pub fn json(path: &std::path::Path, source: serde_json::Error) -> Self {
        Error::Json { path: path.display().to_string(), source }
    }
}
