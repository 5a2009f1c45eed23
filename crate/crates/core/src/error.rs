use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Ev3Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Ev3Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("unknown teacher `{0}`")]
    UnknownTeacher(String),

    #[error("teacher calibration failed: test accuracy {accuracy:.4} is below the floor {floor:.4}")]
    Calibration { accuracy: f64, floor: f64 },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Ev3Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Ev3Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Ev3Error::Io {
            path: path.into(),
            source,
        }
    }
}
