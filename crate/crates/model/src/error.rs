use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] odgen_core::Error),
    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Core(e) => e.category(),
            Error::Tensor(_) => "tensor",
            Error::Config(_) => "config",
            Error::Dimension(_) => "dimension",
            Error::Input(_) => "input",
            Error::Capacity(_) => "capacity",
            Error::State(_) => "state",
            Error::Divergence(_) => "divergence",
            Error::Load { .. } => "load",
            Error::Io { .. } => "io",
        }
    }

    /// Lossy conversion for callers that speak the core error type.
    pub fn into_core(self) -> odgen_core::Error {
        use odgen_core::Error as C;
        match self {
            Error::Core(e) => e,
            Error::Config(m) => C::Config(m),
            Error::Dimension(m) => C::Dimension(m),
            Error::Input(m) => C::Input(m),
            Error::Capacity(m) => C::Capacity(m),
            Error::State(m) => C::State(m),
            Error::Load { path, reason } => C::Load { path, reason },
            Error::Io { path, source } => C::Io { path, source },
            other => C::State(other.to_string()),
        }
    }
}

pub(crate) fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

pub(crate) fn load(path: &Path, reason: impl Into<String>) -> Error {
    Error::Load { path: path.to_path_buf(), reason: reason.into() }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
