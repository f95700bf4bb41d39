use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("bad model magic")]
    BadMagic,

    #[error("unsupported model version {0}")]
    UnsupportedVersion(u32),

    #[error("model checksum mismatch")]
    ChecksumMismatch,

    #[error("malformed model file: {0}")]
    MalformedModel(String),

    #[error("no valid pixels")]
    NoValidPixels,

    #[error("node {0} has no cost assigned")]
    MissingCost(usize),

    #[error("node {0} has no class distribution assigned")]
    MissingDistribution(usize),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArg(msg.into())
    }
}
