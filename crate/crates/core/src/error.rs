use std::path::PathBuf;

/// Errors raised by problem construction, training and persistence.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("boundary code layout mismatch: expected {expected}, found {found}")]
    LayoutMismatch { expected: String, found: String },

    #[error("obstacle capacity exceeded: {count} obstacles, layout holds {capacity}")]
    CapacityExceeded { count: usize, capacity: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("time step {step} out of range 0..={max}")]
    StepOutOfRange { step: usize, max: usize },

    #[error("non-finite state at step {step} (theta norm {theta_norm:.3e}, phi norm {phi_norm:.3e})")]
    Diverged {
        step: usize,
        theta_norm: f64,
        phi_norm: f64,
    },

    #[error("grid stability check failed: {0}")]
    Stability(String),

    #[error("incompatible inputs: {0}")]
    Incompatible(String),

    #[error("quadrature grid too coarse: cell {cell:.4} exceeds {limit:.4}")]
    CoarseGrid { cell: f64, limit: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
