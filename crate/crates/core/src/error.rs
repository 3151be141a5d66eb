use std::path::PathBuf;

/// Errors produced by the deblurring pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("timestep ordering error: expected t > t_prev, got t={t}, t_prev={t_prev}")]
    Ordering { t: usize, t_prev: usize },

    #[error("missing argument: {0}")]
    MissingArgument(&'static str),

    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    #[error("data error in {}: {msg}", path.display())]
    Data { path: PathBuf, msg: String },

    #[error("training diverged at step {step}: {msg}")]
    Training { step: usize, msg: String },

    #[error("dependency error: {0}")]
    Dependency(String),

    #[error("non-finite loss at iteration {iteration} (fidelity={fidelity}, aesthetic={aesthetic}, perceptual={perceptual})")]
    NonFinite {
        iteration: usize,
        fidelity: f64,
        aesthetic: f64,
        perceptual: f64,
    },

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("safetensors: {0}")]
    Safetensors(#[from] safetensors::SafeTensorError),
}

impl Error {
    pub(crate) fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
