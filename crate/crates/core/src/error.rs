use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error(
        "simulation diverged for subject {subject} at t={t_min} min (glucose {glucose:.3} mg/dL)"
    )]
    SimulationDiverged {
        subject: u32,
        t_min: f64,
        glucose: f64,
    },

    #[error("cohort generation failed for subject {subject}: {reason}")]
    CohortGeneration { subject: u32, reason: String },

    #[error("meal generation failed on day {day}: {reason}")]
    MealGeneration { day: usize, reason: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error("ill-posed regression: {0}")]
    IllPosed(String),

    #[error("identification failed: {0}")]
    Identification(String),

    #[error(
        "Riccati iteration did not converge after {iterations} iterations (last change {delta:e})"
    )]
    RiccatiNonConvergence { iterations: usize, delta: f64 },

    #[error("QP solver failed after {iterations} iterations (stationarity {stationarity:e}, feasibility {feasibility:e})")]
    SolverFailure {
        iterations: usize,
        stationarity: f64,
        feasibility: f64,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate test: {0}")]
    DegenerateTest(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
