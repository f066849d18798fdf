use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape in {op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("invalid config field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("parse error in {file}: field `{field}`: {msg}")]
    Parse {
        file: String,
        field: String,
        msg: String,
    },

    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("non-finite loss at step {step} (t = {t:?}, batch = {batch:?})")]
    NonFinite {
        step: usize,
        t: Vec<f64>,
        batch: Vec<String>,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn invalid_shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidShape {
            op,
            msg: msg.into(),
        }
    }

    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn parse(file: impl Into<String>, field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::InvalidShape { .. } => "shape",
            Error::InvalidCamera(_) => "camera",
            Error::Degenerate(_) => "degenerate",
            Error::Config { .. } => "config",
            Error::Domain(_) => "domain",
            Error::Parse { .. } => "parse",
            Error::Version { .. } => "version",
            Error::Integrity(_) => "integrity",
            Error::NonFinite { .. } => "non_finite",
            Error::Invalid(_) => "invalid",
            Error::Io { .. } => "io",
        }
    }
}
