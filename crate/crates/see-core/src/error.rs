use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by parsing, validation, inference, and the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input bytes; `offset` is the byte position of the bad record.
    #[error("parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },

    /// Event coordinates fall outside the declared sensor geometry.
    #[error("geometry error at record {record}: ({x},{y}) outside {width}x{height}")]
    Geometry {
        record: usize,
        x: u16,
        y: u16,
        width: u16,
        height: u16,
    },

    /// Event timestamps decreased within a stream.
    #[error("ordering error at record {record}: timestamp {t} is earlier than {prev}")]
    Ordering { record: usize, t: u64, prev: u64 },

    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Tensor/weight shapes do not line up; `layer` names the offender.
    #[error("shape mismatch in {layer}: {reason}")]
    Shape { layer: String, reason: String },

    /// Weight container failed validation.
    #[error("container error: {0}")]
    Container(String),

    /// Hardware or search configuration is unusable.
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn shape(layer: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            reason: reason.into(),
        }
    }

    pub fn container(msg: impl Into<String>) -> Self {
        Error::Container(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by the host filesystem rather than input content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}
