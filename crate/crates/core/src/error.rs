use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("tape error: {0}")]
    Tape(String),

    #[error("invalid grid spec: {0}")]
    GridSpec(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown texture id {0}")]
    UnknownTexture(u32),

    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("checkpoint config mismatch: file digest {found} != expected {expected}")]
    ConfigDigest { found: String, expected: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
