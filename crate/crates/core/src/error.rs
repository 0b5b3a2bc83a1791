use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("scaling error: {0}")]
    Scaling(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("ROI extraction error: {0}")]
    Extraction(String),

    #[error("ingestion error for case {case_id}: {reason}")]
    Ingestion { case_id: String, reason: String },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("case {case_id}: {source}")]
    Case {
        case_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_case(case_id: &str) -> impl Fn(Error) -> Error + '_ {
        move |e| Error::Case {
            case_id: case_id.to_string(),
            source: Box::new(e),
        }
    }
}
