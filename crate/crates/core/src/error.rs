use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("NIfTI error: {0}")]
    Nifti(String),

    #[error("registration failed: {0}")]
    Registration(String),

    #[error("solver diverged at iteration {iteration} (objective {objective:.6e})")]
    Diverged {
        iteration: usize,
        objective: f64,
        trace: Vec<f64>,
    },

    #[error("no ventricle found")]
    NoVentricleFound,

    #[error("design matrix is rank deficient; collinear columns: {}", .0.join(", "))]
    RankDeficient(Vec<String>),

    #[error("template construction failed for member {index}: {source}")]
    TemplateMember {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("pipeline stage `{stage}` failed for subject {subject}: {message}")]
    Stage {
        subject: String,
        stage: String,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("plotting error: {0}")]
    Plot(String),
}

pub type Result<T> = std::result::Result<T, Error>;
