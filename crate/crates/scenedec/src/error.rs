//! Crate-wide error type.

use crate::gradcore::GradError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Grad(#[from] GradError),

    // -- text encoding -------------------------------------------------
    #[error("unknown word in prompt: {0:?}")]
    UnknownWord(String),
    #[error("handle name already in use: {0:?}")]
    DuplicateHandle(String),
    #[error("unknown initializer word: {0:?}")]
    UnknownInitializer(String),
    #[error("unknown handle: {name:?} (available: {available})")]
    UnknownHandle { name: String, available: String },
    #[error("prompt needs {needed} tokens but the sequence length is {max}")]
    PromptTooLong { needed: usize, max: usize },
    #[error("token position {pos} is not a handle in this prompt")]
    NotAHandle { pos: usize },

    // -- diffusion / denoiser -------------------------------------------
    #[error("timestep {t} out of range (schedule has {max} steps)")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("{what}: dimensions {dims:?} not divisible by {by}")]
    IndivisibleDims { what: String, dims: Vec<usize>, by: usize },
    #[error("{what}: expected {expected} entries, got {got}")]
    LengthMismatch { what: String, expected: usize, got: usize },
    #[error("shape mismatch in {what}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { what: String, lhs: Vec<usize>, rhs: Vec<usize> },

    // -- scenes / config -------------------------------------------------
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty segmentation for class {0:?}")]
    EmptySegmentation(String),
    #[error("annotation parse error at {location}: {message}")]
    AnnotationParse { location: String, message: String },
    #[error("missing file: {0}")]
    MissingFile(std::path::PathBuf),
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    // -- environment -------------------------------------------------
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: std::path::PathBuf,
        source: image::ImageError,
    },
}

impl Error {
    /// True for errors caused by bad user input (configs, prompts, files),
    /// as opposed to internal runtime failures. The CLI maps these to exit 2.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. })
    }

    pub(crate) fn io(path: impl Into<std::path::PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<std::path::PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }
}
