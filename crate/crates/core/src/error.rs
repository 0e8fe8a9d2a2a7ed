use chrono::NaiveDate;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown metric `{0}`")]
    UnknownMetric(String),

    #[error("unknown user `{0}`")]
    UnknownUser(String),

    #[error("insufficient history for the {mode} indicator of user `{user}` on {day}")]
    InsufficientHistory {
        mode: &'static str,
        user: String,
        day: NaiveDate,
    },

    #[error(
        "no k on the grid satisfies returning <= {returning_max} and missed <= {missed_max} \
         (best returning fraction {best_returning}, best missed fraction {best_missed})"
    )]
    NoDefinition {
        returning_max: f64,
        missed_max: f64,
        best_returning: f64,
        best_missed: f64,
    },

    #[error("censoring survival estimate is zero at day {0}")]
    ZeroCensoringWeight(i64),

    #[error("every bootstrap round was skipped (no held-out events)")]
    NoUsableRounds,

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
