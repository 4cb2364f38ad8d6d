use thiserror::Error;

use crate::neural::LstmModel;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate geometry: {0}")]
    Geometry(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// The longitudinal predictor could not integrate to the target energy.
    #[error("prediction failed: {0}")]
    Prediction(String),

    /// The step-halving line search found no decrease in |z|.
    #[error("corrector stalled after {halvings} step halvings")]
    CorrectorStall { halvings: u32 },

    /// The closed-loop trajectory ended before reaching the target energy.
    #[error("simulation failed: {0}")]
    Simulation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("ingestion error: {0}")]
    Ingest(String),

    /// Training produced a non-finite loss. Carries the last parameter set
    /// that produced finite losses.
    #[error("training diverged at epoch {epoch}")]
    Divergence {
        epoch: usize,
        checkpoint: Box<LstmModel>,
    },

    /// The curriculum loop saw the mean terminal miss grow for too many
    /// consecutive iterations.
    #[error("curriculum diverged after iteration {iteration}")]
    CurriculumDivergence {
        iteration: usize,
        history: Vec<crate::pipeline::CurriculumRecord>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
