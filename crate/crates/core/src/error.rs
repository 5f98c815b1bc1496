use std::path::PathBuf;

use crate::timeseries::CalendarDate;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: malformed date {value:?}")]
    MalformedDate {
        path: PathBuf,
        line: usize,
        value: String,
    },
    #[error("{path}:{line}: {message}")]
    MalformedRow {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: negative death count {value}")]
    NegativeDeaths {
        path: PathBuf,
        line: usize,
        value: String,
    },
    #[error("{path}:{line}: duplicate date {date}")]
    DuplicateDate {
        path: PathBuf,
        line: usize,
        date: CalendarDate,
    },
    #[error("{location}: unknown SSC code {token:?}")]
    UnknownSscCode { token: String, location: String },
    #[error("invalid series: {0}")]
    InvalidSeries(String),

    #[error("cannot impute deaths on {0}: no earlier year has data for that month")]
    Unimputable(CalendarDate),
    #[error("cannot impute {variable}: first record is missing")]
    MissingLeadingMeteo { variable: &'static str },
    #[error("index {index} out of range for series of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("missing {what} on {dates:?}")]
    MissingValues { what: &'static str, dates: Vec<CalendarDate> },

    #[error("underdetermined fit: {observations} observations for {parameters} parameters")]
    Underdetermined { observations: usize, parameters: usize },
    #[error("all counts are zero")]
    AllZeroCounts,
    #[error("IRLS did not converge after {0} iterations")]
    NotConverged(usize),
    #[error("singular fit: {0}")]
    SingularFit(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    Diverged(&'static str),
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("non-positive baseline {value} on {date}")]
    NonPositiveBaseline { date: String, value: f64 },
    #[error("no event days inside the forecast horizon")]
    EmptyHorizon,
    #[error("confusion counts are all zero")]
    EmptyCounts,
    #[error("unknown event {0}")]
    UnknownEvent(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
