use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("duplicate record for participant {id} at visit {visit}")]
    Duplicate { id: String, visit: usize },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{name} out of range: {message}")]
    Range { name: &'static str, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("matrix is not positive definite: {0}")]
    Decomposition(String),

    #[error("design is rank deficient; aliased columns: {}", .columns.join(", "))]
    Rank { columns: Vec<String> },

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("all covariance structures failed to converge: {}", .attempts.join("; "))]
    Convergence { attempts: Vec<String> },

    #[error("invalid state: {0}")]
    State(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("assumption violated: {0}")]
    Assumption(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("infeasible configuration: {0}")]
    Feasibility(String),

    #[error("study quality check failed: {failures} of {replicates} replicates failed")]
    StudyQuality { failures: usize, replicates: usize },

    #[error("study failed: {0}")]
    Study(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad input data or arguments, as opposed to
    /// numerical breakdown during estimation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Duplicate { .. }
                | Error::Validation(_)
                | Error::Config(_)
                | Error::Range { .. }
                | Error::Shape(_)
                | Error::Index(_)
                | Error::InsufficientData(_)
                | Error::Argument(_)
                | Error::Io(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
