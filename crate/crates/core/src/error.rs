use thiserror::Error;

pub type Result<T, E = CboError> = std::result::Result<T, E>;

/// Which side of a box coordinate collapsed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoxSide {
    Upper,
    Lower,
}

impl std::fmt::Display for BoxSide {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BoxSide::Upper => f.write_str("upper"),
            BoxSide::Lower => f.write_str("lower"),
        }
    }
}

#[derive(Debug, Error)]
pub enum CboError {
    #[error("degenerate box: coordinate {index} has zero width on the {side} side")]
    DegenerateBox { index: usize, side: BoxSide },

    #[error("point is not strictly feasible (minimum margin {margin:e})")]
    BoundaryViolation { margin: f64 },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },

    #[error("linear solver did not converge in {iterations} iterations (residual norm {residual:e})")]
    SolverFailure { iterations: usize, residual: f64 },

    #[error("system matrix is not positive definite (curvature {curvature:e} along a search direction)")]
    NotPositiveDefinite { curvature: f64 },

    #[error("oracle audit failed: worst relative error {worst:e} exceeds {tolerance:e}")]
    AuditFailed { worst: f64, tolerance: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error for `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("outer step {step} failed: {source}")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<CboError>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CboError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        CboError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CboError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            CboError::Config { .. } | CboError::DegenerateBox { .. } | CboError::InvalidArgument(_) => 2,
            CboError::Io { .. } => 4,
            CboError::StepFailed { source, .. } => source.exit_code(),
            _ => 3,
        }
    }

    /// Numeric failures never carry a config or I/O cause.
    pub fn is_numeric(&self) -> bool {
        self.exit_code() == 3
    }
}
