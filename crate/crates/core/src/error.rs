use std::path::PathBuf;

use thiserror::Error;

/// Which side of a two-mask comparison an error refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    First,
    Second,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Side::First => f.write_str("first"),
            Side::Second => f.write_str("second"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("label {0} not found")]
    LabelNotFound(u32),
    #[error("box {min:?}..={max:?} out of range for dims {dims:?}")]
    BoxOutOfRange {
        min: [usize; 3],
        max: [usize; 3],
        dims: [usize; 3],
    },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported header field `{0}`")]
    UnsupportedField(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no displacement field supplied for region {0}")]
    MissingRegionField(u32),
    #[error("region {0} supplied more than once")]
    DuplicateLabel(u32),
    #[error("every voxel has a non-positive Jacobian determinant")]
    AllVoxelsFolded,
    #[error("region of interest is empty")]
    EmptyRoi,
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("loss became non-finite at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("region {0} is empty")]
    EmptyRegion(u32),
    #[error("label sets differ; offending labels {0:?}")]
    LabelSetMismatch(Vec<u32>),
    #[error("label {0} has no entry in the merge mapping")]
    UnmappedLabel(u32),
    #[error("target Dice {target} unreachable (stalled at {achieved})")]
    TargetUnreachable { target: f64, achieved: f64 },
    #[error("label {label} has an empty surface in the {side} mask")]
    EmptySurface { label: u32, side: Side },
    #[error("phantom specification infeasible: {0}")]
    SpecInfeasible(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("region {label}: {source}")]
    Region {
        label: u32,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Stable machine-readable code for structured error output.
    pub fn code(&self) -> &'static str {
        match self {
            Error::GridMismatch(_) => "GRID_MISMATCH",
            Error::LabelNotFound(_) => "LABEL_NOT_FOUND",
            Error::BoxOutOfRange { .. } => "BOX_OUT_OF_RANGE",
            Error::InvalidGrid(_) => "INVALID_GRID",
            Error::Parse { .. } => "PARSE_ERROR",
            Error::UnsupportedField(_) => "UNSUPPORTED_FIELD",
            Error::Io { .. } => "IO_ERROR",
            Error::MissingRegionField(_) => "MISSING_REGION_FIELD",
            Error::DuplicateLabel(_) => "DUPLICATE_LABEL",
            Error::AllVoxelsFolded => "ALL_VOXELS_FOLDED",
            Error::EmptyRoi => "EMPTY_ROI",
            Error::MissingInput(_) => "MISSING_INPUT",
            Error::NonFiniteLoss { .. } => "NON_FINITE_LOSS",
            Error::EmptyRegion(_) => "EMPTY_REGION",
            Error::LabelSetMismatch(_) => "LABEL_SET_MISMATCH",
            Error::UnmappedLabel(_) => "UNMAPPED_LABEL",
            Error::TargetUnreachable { .. } => "TARGET_UNREACHABLE",
            Error::EmptySurface { .. } => "EMPTY_SURFACE",
            Error::SpecInfeasible(_) => "SPEC_INFEASIBLE",
            Error::InvalidConfig(_) => "INVALID_CONFIG",
            Error::Region { source, .. } => source.code(),
        }
    }

    /// Innermost error, looking through region wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Region { source, .. } => source.root(),
            other => other,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
