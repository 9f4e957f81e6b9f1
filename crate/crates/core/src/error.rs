use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("simulation diverged at step {step}")]
    Divergence { step: usize },

    #[error("non-finite {what}")]
    NonFinite { what: String },

    #[error("trajectory too short: {len} samples, need at least {needed}")]
    TooShort { len: usize, needed: usize },

    #[error("gave up after {attempts} divergent rollouts")]
    RetriesExhausted { attempts: usize },

    #[error("malformed container {path:?}: {reason}")]
    Container { path: PathBuf, reason: String },

    #[error("missing block `{0}` in container")]
    MissingBlock(String),

    #[error("unsupported format tag `{found}` (expected `{expected}`)")]
    Format { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("config render error: {0}")]
    TomlRender(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
