use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("input file contains no data rows")]
    EmptyFile,
    #[error("degenerate split: segment '{0}' would be empty")]
    DegenerateSplit(String),
    #[error("split fractions must be positive and sum to 1 (got sum {0})")]
    BadSplitFractions(f64),
    #[error("series too short: need at least {needed} steps, have {have}")]
    TooShort { needed: usize, have: usize },
    #[error("moving-average kernel size must be odd (got {0})")]
    EvenKernel(usize),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("teacher-forced rollout requires a ground-truth stream")]
    MissingTruth,
    #[error("insufficient data to fit forecaster: {0}")]
    InsufficientData(String),
    #[error("replay file schema error: {0}")]
    Schema(String),
    #[error("no stored forecast for series '{series_id}' at t={t}")]
    MissingForecast { series_id: String, t: usize },
    #[error("sample set is empty")]
    EmptySampleSet,
    #[error("training frame admits only {available} windows, need {needed}")]
    InsufficientTrainWindows { needed: usize, available: usize },
    #[error("beta selection set is empty")]
    EmptySet,
    #[error("error-reduction baseline must be positive")]
    ZeroBaseline,
    #[error("all cells excluded from MAPE (|truth| below threshold everywhere)")]
    AllCellsExcluded,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value produced during {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
