use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid configuration:\n{}", .0.iter().map(|e| format!("  - {e}")).collect::<Vec<_>>().join("\n"))]
    ConfigList(Vec<String>),

    #[error("non-finite value at coordinate {coord}: {value}")]
    Numeric { coord: usize, value: f64 },

    #[error("sampling diverged at step {step} (t = {t}): {source}")]
    Sampling {
        step: usize,
        t: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    TrainingDivergence { epoch: usize, loss: f64 },

    #[error("evaluation outside the numerically safe range: {0}")]
    Range(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("artifact directory {path} is locked by another run")]
    Locked { path: PathBuf },

    #[error("provenance mismatch in {path}: expected digest {expected}, found {found}")]
    Provenance {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("missing inputs:\n{}", .0.iter().map(|p| format!("  - {}", p.display())).collect::<Vec<_>>().join("\n"))]
    MissingInputs(Vec<PathBuf>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Shape { expected, actual })
    }
}

pub(crate) fn check_finite(v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(coord) => Err(Error::Numeric {
            coord,
            value: v[coord],
        }),
        None => Ok(()),
    }
}
