use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("split index {0} out of range (expected 0..=3)")]
    SplitIndex(usize),

    #[error("empty mask: {0}")]
    EmptyMask(&'static str),

    #[error("class {class} has {available} images but the episode needs {needed}")]
    InsufficientImages { class: u8, available: usize, needed: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("target value {value} out of range for {classes} classes")]
    TargetOutOfRange { value: u8, classes: usize },

    #[error("iteration {iter} exceeds schedule length {total}")]
    ScheduleOverrun { iter: usize, total: usize },

    #[error("class {0} is not part of this split's evaluation classes")]
    UnknownClass(u8),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("loss weight must be non-negative, got {0}")]
    NegativeWeight(f64),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("{context} ({path}): {source}")]
    Io {
        context: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(context: &'static str, path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { context, path, source }
    }
}
