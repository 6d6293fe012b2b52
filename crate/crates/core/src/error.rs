use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("singular matrix: {what} (condition estimate {condition:.3e})")]
    Singular { what: String, condition: f64 },

    #[error("copula calibration failed in cluster {cluster} for pair ({l}, {r}): {reason}")]
    Calibration {
        cluster: usize,
        l: usize,
        r: usize,
        reason: String,
    },

    #[error("every fit on the lambda grid failed: {0}")]
    AllFitsFailed(String),

    #[error("bootstrap produced {valid} usable replicates out of {requested}")]
    Bootstrap { valid: usize, requested: usize },

    #[error("campaign aborted: {failed} of {attempted} replicates failed for {cell}")]
    CampaignAborted {
        cell: String,
        failed: usize,
        attempted: usize,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
