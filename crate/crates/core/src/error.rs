use thiserror::Error;

/// Errors raised across the segmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate class {class}: no voxel carries this label")]
    DegenerateClass { class: usize },

    #[error("zero variance: cannot z-normalize a constant volume")]
    ZeroVariance,

    #[error("patch too large: patch {patch:?} exceeds volume shape {shape:?}")]
    PatchTooLarge { patch: [usize; 3], shape: [usize; 3] },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt payload: {0}")]
    CorruptPayload(String),

    #[error("duplicate class name `{0}`")]
    DuplicateClassName(String),

    #[error("class count mismatch: expected {expected}, found {found}")]
    ClassCountMismatch { expected: usize, found: usize },

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("shape not divisible: {shape:?} must be a multiple of {multiple} on every axis")]
    ShapeNotDivisible { shape: [usize; 3], multiple: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("coordinate {coord:?} out of bounds for shape {shape:?}")]
    OutOfBounds { coord: [usize; 3], shape: [usize; 3] },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("no foreground: sample contains only background voxels")]
    NoForeground,

    #[error("duplicate coordinate {0:?}")]
    DuplicateCoordinate([usize; 3]),

    #[error("infeasible sampling request: {0}")]
    InfeasibleSample(String),

    #[error("unsupported checkpoint version {0}")]
    UnsupportedCheckpointVersion(u32),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unmappable class name `{0}`")]
    UnmappableClass(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
