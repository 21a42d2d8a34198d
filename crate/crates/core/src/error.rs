use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch on {axis}: {detail}")]
    Shape { op: &'static str, axis: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label value {value} is out of range for {classes} classes")]
    Label { value: usize, classes: usize },

    #[error("backward was already run on this graph; reset by building a new graph")]
    BackwardTwice,

    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("{path}: {source}")]
    Module { path: String, source: Box<Error> },
}

impl Error {
    pub(crate) fn shape(op: &'static str, axis: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, axis, detail: detail.into() }
    }

    /// Prefix the error with the module path it surfaced in.
    pub fn within(self, path: impl Into<String>) -> Self {
        let path = path.into();
        match self {
            Error::Module { path: inner, source } => Error::Module { path: format!("{path}.{inner}"), source },
            other => Error::Module { path, source: Box::new(other) },
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait ResultExt<T> {
    fn within(self, path: &str) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn within(self, path: &str) -> Result<T> {
        self.map_err(|e| e.within(path))
    }
}
