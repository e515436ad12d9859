use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("expected a scalar node, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("unknown skill `{0}`")]
    UnknownSkill(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("duplicate name `{0}`")]
    Duplicate(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("non-finite loss {value} at step {step}")]
    Diverged { step: u64, value: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("malformed data: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
