use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point ({lat}, {lon}) lies outside the bounding box")]
    OutOfBounds { lat: f64, lon: f64 },

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("records for vehicle {vehicle} are not time-ordered at timestamp {timestamp}")]
    UnorderedInput { vehicle: String, timestamp: i64 },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("series too short: {0}")]
    SeriesTooShort(String),

    #[error("singular least-squares system")]
    SingularSystem,

    #[error("forecast horizon of {horizon} slots exceeds one season ({period})")]
    HorizonTooFar { horizon: i64, period: i64 },

    #[error("no speed reference available")]
    NoReferenceAvailable,

    #[error("no neighboring trips")]
    NoNeighbors,

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("length mismatch: {0} truths vs {1} estimates")]
    LengthMismatch(usize, usize),

    #[error("truth values must be positive, got {0}")]
    NonPositiveTruth(f64),

    #[error("empty input")]
    EmptyInput,

    #[error("insufficient neighbor pairs: {0}")]
    InsufficientPairs(usize),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid snapshot: {0}")]
    Snapshot(String),

    #[error("parse error: {0}")]
    Parse(String),
}
