use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: bad shape {shape:?}: {reason}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    /// Wraps an error with the model layer it happened in.
    #[error("in layer {path}: {source}")]
    Layer {
        path: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{0}")]
    Invalid(String),

    /// Config validation reports every bad field at once.
    #[error("config validation failed:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("taxonomy: {0}")]
    Taxonomy(String),

    #[error("non-finite {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// File content violates its format (bad magic, truncation, schema, ...).
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// `map_err` helper attaching a layer path.
    pub fn in_layer(path: impl Into<String>) -> impl FnOnce(Error) -> Error {
        let path = path.into();
        move |e| Error::Layer {
            path,
            source: Box::new(e),
        }
    }
}
