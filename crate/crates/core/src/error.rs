use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("audio buffer is empty")]
    EmptyAudio,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("group error: {0}")]
    Group(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("training diverged at epoch {epoch}, step {step} (loss = {loss})")]
    Divergence {
        epoch: usize,
        step: usize,
        loss: f32,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("missing files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFiles(Vec<PathBuf>),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (paths, configs, files) rather
    /// than failures during a computation.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            Error::Divergence { .. } | Error::NonFinite(_) | Error::Graph(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
