use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("value {value} is not valid for {kind} loss")]
    Domain { kind: &'static str, value: f64 },

    #[error("observed matrix has no entries")]
    EmptyObservation,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("solver diverged at iteration {iteration} (objective {objective})")]
    Diverged { iteration: usize, objective: f64 },

    #[error("design matrix is rank deficient; collinear columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("perfect separation in logistic regression along direction {direction:?}")]
    Separation { direction: Vec<f64> },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("treatment arm {arm} has no units")]
    EmptyArm { arm: u8 },

    #[error("matrix is identically zero")]
    ZeroMatrix,

    #[error("unknown estimator pipeline `{0}`")]
    UnknownEstimator(String),

    #[error("prep step `{prep}` failed: {message}")]
    Prep { prep: String, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
