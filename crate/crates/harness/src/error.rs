use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid workload: {0}")]
    InvalidSpec(String),
    #[error("bad trace file: {0}")]
    BadTrace(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] hps_core::Error),
    #[error(transparent)]
    Protocol(#[from] hps_service::ProtocolError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
