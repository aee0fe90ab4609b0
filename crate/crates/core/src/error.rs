use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (stepping a dead bird,
    /// updating α with a colliding plan, wrong tensor shape, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("insufficient observations: {0}")]
    InsufficientObservations(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing artifact `{}`: {what}", path.display())]
    MissingArtifact { what: String, path: PathBuf },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
