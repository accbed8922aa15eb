use thiserror::Error;

use crate::registry::RegistryError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("insufficient donors: {found} with observed education, need {needed}")]
    InsufficientDonors { found: usize, needed: usize },
    #[error("trajectory truncated by death: patient {patient_id} died before month {month}")]
    TrajectoryTruncated { patient_id: String, month: u32 },
    #[error("no common support for stratum {stratum}")]
    NoCommonSupport { stratum: u32 },
    #[error("outcome {outcome} month {month} beyond availability horizon {horizon}")]
    BeyondHorizon {
        outcome: String,
        month: u32,
        horizon: u32,
    },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("stage {stage} failed{}: {source}", .stratum.map(|w| format!(" (stratum {w})")).unwrap_or_default())]
    Stage {
        stage: String,
        stratum: Option<u32>,
        #[source]
        source: Box<Error>,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn in_stage(self, stage: &str, stratum: Option<u32>) -> Error {
        Error::Stage {
            stage: stage.to_string(),
            stratum,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
