use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameters, bounds, schedules or scenario settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// A car-following law was queried with a non-positive gap.
    #[error("collision state: gap {gap} m")]
    CollisionState { gap: f64 },

    /// Input file does not match the expected column schema.
    #[error("schema error: {0}")]
    Schema(String),

    #[error("evaluation fault: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
