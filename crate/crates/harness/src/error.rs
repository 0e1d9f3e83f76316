use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot parse configuration: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("cannot write configuration: {0}")]
    TomlWrite(#[from] toml::ser::Error),
    #[error(transparent)]
    Core(#[from] calico_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("service error: {0}")]
    Service(String),
}

impl HarnessError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        HarnessError::Config(msg.into())
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
