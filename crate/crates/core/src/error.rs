use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("tensor `{name}`: {reason}")]
    ShapeDataMismatch { name: String, reason: String },

    #[error("tensor `{name}`: unsupported dtype `{dtype}`")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("parameter sets differ: {0}")]
    ParameterSetMismatch(String),

    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("non-finite value in `{0}`")]
    NonFiniteValue(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("task list is empty")]
    EmptyTaskList,

    #[error("trim fraction {0} outside (0, 1]")]
    InvalidTrimFraction(f64),

    #[error("drop rate {0} outside [0, 1)")]
    InvalidDropRate(f64),

    #[error("alpha {0} outside (0, 1]")]
    InvalidAlpha(f64),

    #[error("target task {target} out of range for {tasks} tasks")]
    InvalidTargetTask { target: usize, tasks: usize },

    #[error("invalid pattern `{pattern}`: {reason}")]
    InvalidPattern { pattern: String, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("input contains non-finite entries")]
    NonFiniteInput,

    #[error("direction is not unit length (norm {0})")]
    NonUnitDirection(f64),

    #[error("response norm {norm} at or below threshold {threshold}")]
    DegenerateResponse { norm: f64, threshold: f64 },

    #[error("SVD did not converge within {0} sweeps")]
    ConvergenceFailure(usize),

    #[error("parameter `{name}`: {source}")]
    Parameter {
        name: String,
        #[source]
        source: Box<Error>,
    },
}

/// Process exit status classes used by the command-line front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage = 1,
    Data = 2,
    Numerical = 3,
}

impl Error {
    pub fn in_parameter(self, name: &str) -> Self {
        match self {
            e @ Error::Parameter { .. } => e,
            e => Error::Parameter {
                name: name.to_string(),
                source: Box::new(e),
            },
        }
    }

    /// Stable snake_case identifier for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io_failure",
            Error::MalformedHeader(_) => "malformed_header",
            Error::ShapeDataMismatch { .. } => "shape_data_mismatch",
            Error::UnsupportedDtype { .. } => "unsupported_dtype",
            Error::ParameterSetMismatch(_) => "parameter_set_mismatch",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFiniteValue(_) => "non_finite_value",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::EmptyTaskList => "empty_task_list",
            Error::InvalidTrimFraction(_) => "invalid_trim_fraction",
            Error::InvalidDropRate(_) => "invalid_drop_rate",
            Error::InvalidAlpha(_) => "invalid_alpha",
            Error::InvalidTargetTask { .. } => "invalid_target_task",
            Error::InvalidPattern { .. } => "invalid_pattern",
            Error::InvalidConfig(_) => "invalid_config",
            Error::NonFiniteInput => "non_finite_input",
            Error::NonUnitDirection(_) => "non_unit_direction",
            Error::DegenerateResponse { .. } => "degenerate_response",
            Error::ConvergenceFailure(_) => "convergence_failure",
            Error::Parameter { source, .. } => source.kind(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidTrimFraction(_)
            | Error::InvalidDropRate(_)
            | Error::InvalidAlpha(_)
            | Error::InvalidTargetTask { .. }
            | Error::InvalidPattern { .. }
            | Error::InvalidConfig(_) => ErrorClass::Usage,
            Error::NonFiniteInput
            | Error::NonUnitDirection(_)
            | Error::DegenerateResponse { .. }
            | Error::ConvergenceFailure(_) => ErrorClass::Numerical,
            Error::Parameter { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }
}
