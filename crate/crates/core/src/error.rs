use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} outside schedule domain [{t_min}, {t_max}]")]
    Domain { t: f64, t_min: f64, t_max: f64 },

    #[error("singularity: {0}")]
    Singular(String),

    #[error("degenerate data statistics: cov0T^2 = {cov_sq} >= var0*varT = {bound}")]
    DegenerateStats { cov_sq: f64, bound: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("diverged sampling at step {step} (t = {t})")]
    DivergedSampling { step: usize, t: f64 },

    #[error("non-finite loss {loss} at t = {t} for subject {subject}")]
    NonFiniteLoss { loss: f64, t: f64, subject: String },

    #[error("undefined test: {0}")]
    UndefinedTest(String),

    #[error("unknown auxiliary variable `{0}`")]
    UnknownVariable(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("checksum mismatch in {path}: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
