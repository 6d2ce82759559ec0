use thiserror::Error;

/// Errors produced by the tensor kernels, spec builders, engine and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("{context}: shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    /// A layer or block configuration violates an invariant.
    #[error("{layer}: {message}")]
    Config { layer: String, message: String },

    /// An operation precondition does not hold.
    #[error("{0}")]
    Precondition(String),

    /// Weight binding failed; every offending tensor is listed.
    #[error("weight binding failed ({} issue(s)):\n{}", .0.len(), .0.join("\n"))]
    Bind(Vec<String>),

    /// Weight container does not start with the expected magic bytes.
    #[error("bad magic: not a LEYW weight store")]
    BadMagic,

    /// Weight container version is not supported.
    #[error("unsupported weight store version {0}")]
    UnsupportedVersion(u32),

    /// Two entries in a weight container share a name.
    #[error("duplicate weight entry {0:?}")]
    DuplicateEntry(String),

    /// Payload length disagrees with the container header.
    #[error("corrupt weight store: {0}")]
    CorruptStore(String),

    /// Image file is not in a supported format.
    #[error("unsupported image format: {0}")]
    ImageFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub fn config(layer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            layer: layer.into(),
            message: message.into(),
        }
    }
}
