use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed genome or choice key.
    #[error("encoding error: {0}")]
    Encoding(String),

    /// Shapes, keys or parameter sets that do not fit the supernet.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed on-disk input (dataset batches, checkpoints, front files).
    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("generation {generation} failed: {source}")]
    Generation {
        generation: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
