use std::fmt;
use std::path::PathBuf;

/// A validation problem tied to a line of a JSON-lines manifest (1-based).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on '{path}': {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on '{path}': {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("invalid manifest: {}", join_lines(.0))]
    Manifest(Vec<LineError>),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("loss precondition violated: {0}")]
    Loss(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch} step {step}; batch records: {}", .records.join(", "))]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        records: Vec<String>,
    },

    #[error("{} missing image files: {}", .0.len(), list_paths(.0))]
    MissingImages(Vec<PathBuf>),

    #[error("external projector failed: {0}")]
    Projector(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn join_lines(errors: &[LineError]) -> String {
    errors
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI for exit codes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Manifest(_) | Error::Validation(_) | Error::Empty(_) => "validation",
            Error::Config(_) => "config",
            Error::Geometry(_) => "geometry",
            Error::Loss(_) => "loss",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::MissingImages(_) => "missing-images",
            Error::Projector(_) => "projector",
            Error::Tensor(_) => "tensor",
            Error::Json(_) | Error::Csv(_) => "format",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// First few paths of a list, for one-line messages.
fn list_paths(paths: &[PathBuf]) -> String {
    const SHOWN: usize = 5;
    let mut text = paths.iter().take(SHOWN).map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ");
    if paths.len() > SHOWN {
        text.push_str(&format!(" and {} more", paths.len() - SHOWN));
    }
    text
}
