use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Variants are grouped by the module that raises them so that CLI messages
/// stay module-qualified.
#[derive(Debug, Error)]
pub enum Error {
    #[error("imgstore: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("imgstore: malformed header: {0}")]
    MalformedHeader(String),
    #[error("imgstore: payload holds {actual} samples but header declares {expected}")]
    PayloadMismatch { expected: usize, actual: usize },
    #[error("imgstore: value outside unit interval: {value} at index {index}")]
    OutsideUnitInterval { value: f32, index: usize },
    #[error("imgstore: raw value {value} exceeds the 16-bit range")]
    RawOverflow { value: u32 },
    #[error("imgstore: invalid image: {0}")]
    InvalidImage(String),

    #[error("preprocess: {0}")]
    Preprocess(String),
    #[error("preprocess: expected a {expected} image")]
    WrongDomain { expected: &'static str },
    #[error("preprocess: constant image after clipping (lo = hi = {0})")]
    ConstantImage(f64),
    #[error("preprocess: zero-variance overlap region at shift ({dx}, {dy})")]
    ZeroVariance { dx: i32, dy: i32 },

    #[error("synthgen: {0}")]
    Synth(String),

    #[error("tensor: shape mismatch: {0}")]
    Shape(String),
    #[error("tensor: backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("checkpoint: bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("checkpoint: unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint: truncated: {0}")]
    Truncated(String),
    #[error("checkpoint: parameter count mismatch: expected {expected} floats, found {actual}")]
    ParamCount { expected: usize, actual: usize },
    #[error("checkpoint: CRC mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Crc { stored: u32, computed: u32 },
    #[error("checkpoint: layer table does not match the architecture: {0}")]
    LayerTable(String),

    #[error("trainer: {0}")]
    Train(String),
    #[error("trainer: non-finite loss at epoch {epoch}, sample {sample}: {value}")]
    NonFiniteLoss {
        epoch: usize,
        sample: String,
        value: f64,
    },

    #[error("evalkit: {0}")]
    Eval(String),
    #[error("evalkit: profile has no dip below background")]
    NoDip,
    #[error("evalkit: only {0} samples in the fit region (need at least 5)")]
    FitRegionTooSmall(usize),
    #[error("evalkit: fit did not converge after {0} iterations")]
    FitNonConvergence(usize),

    #[error("benchkit: {0}")]
    Bench(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
