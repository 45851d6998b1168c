use std::path::PathBuf;

/// Errors produced anywhere in the design / reconstruction pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("matrix not positive definite (pivot {pivot}, value {value:e}) after jitter {jitter:e}")]
    NotPositiveDefinite { pivot: usize, value: f64, jitter: f64 },

    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Training {
        iteration: usize,
        loss: f64,
        trace: Vec<f64>,
    },

    #[error("optimiser failed: {message}")]
    Optimiser { message: String, trace: Vec<f64> },

    #[error("g-prior scale is not positive (g = {g:e}); noise variance exceeds the pilot second moment, review sigma_y^2")]
    NonPositiveG { g: f64 },

    #[error("config error in {path:?}: {message}")]
    Config { path: Option<PathBuf>, message: String },

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape {
            context,
            expected,
            got,
        });
    }
    Ok(())
}
