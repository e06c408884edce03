use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// Variants are grouped by the module that raises them; the CLI maps them
/// onto exit codes via [`Error::category`].
#[derive(Debug, Error)]
pub enum Error {
    // image
    #[error("image has no strictly positive value")]
    AllZeroImage,
    #[error("inclusion {index} does not fit inside a {width}x{height} image")]
    InclusionOutOfBounds { index: usize, width: usize, height: usize },
    #[error("bad magic bytes")]
    BadMagic,
    #[error("file is truncated")]
    TruncatedFile,
    #[error("unsupported PGM maxval {0} (only 255 is supported)")]
    UnsupportedMaxval(u32),
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid ROI: {0}")]
    InvalidRoi(String),

    // speckle simulation
    #[error("image height {height} is smaller than the PSF axial support {support}")]
    ImageTooSmall { height: usize, support: usize },

    // metrics
    #[error("CNR denominator is zero (both regions have zero variance)")]
    ZeroDenominator,
    #[error("region has zero variance")]
    ZeroVariance,
    #[error("profile needs at least two samples, got {0}")]
    ProfileTooShort(usize),
    #[error("wrong ROI kind for {0}")]
    WrongRoiKind(String),

    // nn / network
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("max pooling needs even spatial extents, got {h}x{w}")]
    OddSpatialDims { h: usize, w: usize },
    #[error("spatial extents {h}x{w} are not divisible by {multiple}")]
    NonDivisibleDims { h: usize, w: usize, multiple: usize },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("checkpoint checksum mismatch")]
    ChecksumError,
    #[error("model descriptors do not match: {0}")]
    DescriptorMismatch(String),
    #[error("parameter budget exceeded: {count} > {budget}")]
    BudgetExceeded { count: usize, budget: usize },

    // training
    #[error("corpus has no usable {0} entries")]
    EmptyCorpus(&'static str),
    #[error("non-finite value at step {step}: {what}")]
    NonFiniteLoss { step: usize, what: String },

    // quantization
    #[error("weights contain non-finite values")]
    NonFiniteWeights,
    #[error("calibration set is empty")]
    EmptyCalibrationSet,
    #[error("model has no activation quantization parameters")]
    MissingQuantParams,

    // baselines
    #[error("time step must lie in (0, 0.25], got {0}")]
    NonPositiveTimestep(f64),

    // evaluation and benchmarking
    #[error("no ROI named '{0}'")]
    MissingRoi(String),
    #[error("duration must be positive, got {0} s")]
    InvalidDuration(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse failure class used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidConfig(_)
            | Error::NonPositiveTimestep(_)
            | Error::InvalidRoi(_)
            | Error::MissingRoi(_)
            | Error::InvalidDuration(_) => ErrorCategory::Config,
            Error::NonFiniteLoss { .. } | Error::NonFiniteWeights => ErrorCategory::Numeric,
            _ => ErrorCategory::Data,
        }
    }
}
