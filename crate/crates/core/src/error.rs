use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid voxel tensor: {0}")]
    InvalidTensor(String),

    #[error("duplicate voxel coordinate {0:?}")]
    DuplicateCoordinate([u32; 3]),

    #[error("coordinate {value} on axis {axis} does not fit in {bits} bits")]
    CoordinateOverflow { axis: usize, value: u32, bits: u32 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("malformed {what} at {location}: {msg}")]
    Format {
        what: &'static str,
        location: String,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn format_at_byte(what: &'static str, offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            what,
            location: format!("byte offset {offset}"),
            msg: msg.into(),
        }
    }

    pub(crate) fn format_at_line(what: &'static str, line: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            what,
            location: format!("line {line}"),
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
