use std::io;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum NptError {
    #[error("vector norm {norm:e} is too small to normalize")]
    ZeroVector { norm: f64 },
    #[error("embedding of sample {index} has zero norm")]
    ZeroEmbedding { index: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("radius mismatch: {left} vs {right}")]
    RadiusMismatch { left: f64, right: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("at least two classes are required, got {0}")]
    SingleClass(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("batch contains no anchor with both a positive and a negative")]
    NoValidTriplet,
    #[error("activation tape does not match the model")]
    TapeMismatch,
    #[error("parameter/gradient shapes do not match optimizer state")]
    ShapeMismatch,
    #[error("could not draw {classes} well-separated class directions in {dim} dimensions")]
    UnseparableSpec { classes: usize, dim: usize },
    #[error("bad magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { expected: u32, found: u32 },
    #[error("file truncated: {0}")]
    TruncatedFile(String),
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("class {0} would be left without samples")]
    EmptyClass(usize),
    #[error("dataset invariant violated: {0}")]
    InvalidDataset(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("corrupt checkpoint tensor: {0}")]
    CorruptTensor(String),
    #[error("no genuine or impostor pairs could be formed")]
    NoPairs,
    #[error("probe identity {0} has no gallery entry")]
    MissingGalleryIdentity(usize),
    #[error("class {0} has a zero-norm mean embedding")]
    DegenerateMean(usize),
    #[error("at least three classes are required, got {0}")]
    TooFewClasses(usize),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl NptError {
    /// True for failures caused by numerics rather than input or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            NptError::NonFiniteLoss { .. }
                | NptError::ZeroVector { .. }
                | NptError::ZeroEmbedding { .. }
                | NptError::DegenerateMean(_)
        )
    }
}

pub type Result<T, E = NptError> = std::result::Result<T, E>;
