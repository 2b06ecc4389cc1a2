use thiserror::Error;

#[derive(Debug, Error)]
pub enum DloError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("init error: {0}")]
    Init(String),
    #[error("training error: {0}")]
    Train(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("persisted-state error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DloError>;

impl DloError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        DloError::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefix the originating file path onto a config/format message.
    pub fn with_path(self, path: &std::path::Path) -> Self {
        match self {
            DloError::Config(msg) => DloError::Config(format!("{}: {msg}", path.display())),
            DloError::Format(msg) => DloError::Format(format!("{}: {msg}", path.display())),
            other => other,
        }
    }
}
