use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("no daily statistics for ({ticker}, {date})")]
    MissingDailyStats { ticker: String, date: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("fit did not converge after {iterations} iterations (last estimate {last:?})")]
    NonConvergence { iterations: usize, last: Vec<f64> },

    #[error("oracle integrity failure: {0}")]
    OracleIntegrity(String),

    #[error("missing upstream artifact {path} (rerun stage `{stage}`)")]
    MissingArtifact { stage: String, path: PathBuf },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
