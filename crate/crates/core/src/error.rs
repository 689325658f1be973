use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("singularity: {0}")]
    Singularity(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("enumeration too large: {0}")]
    Size(String),

    #[error("grouping error: {0}")]
    Grouping(String),

    #[error("privacy budget exceeded: spent {spent:.6} > target {target:.6}")]
    Budget { spent: f64, target: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for bad input, 3 for a blown budget.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Format(_)
            | Error::Validation(_)
            | Error::Json(_)
            | Error::Grouping(_)
            | Error::Size(_) => 2,
            Error::Budget { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Validation(msg.into()))
}
