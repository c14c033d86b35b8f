use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed MRC header: field {field}: {detail}")]
    Format { field: &'static str, detail: String },

    #[error("unsupported MRC mode {0} (only 0, 1 and 2 are supported)")]
    UnsupportedMode(i32),

    #[error("truncated data section: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("singular noise level: sigma_a must be positive")]
    SingularNoise,

    #[error("invalid noise map: sigma <= 0 for pixel values in [{min}, {max}]")]
    InvalidNoiseMap { min: f64, max: f64 },

    #[error("frequency error: cutoff {cutoff} 1/A exceeds Nyquist {nyquist} 1/A")]
    Frequency { cutoff: f64, nyquist: f64 },

    #[error("degenerate target bank: {0}")]
    DegenerateBank(String),

    #[error("numerical integration did not converge: error estimate {estimate:e} > {tolerance:e}")]
    Integration { estimate: f64, tolerance: f64 },

    #[error("non-finite loss at epoch {epoch}, step {step}; last good checkpoint: {checkpoint}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        checkpoint: String,
    },

    #[error("denoising diverged at iteration {0}")]
    Divergence(usize),

    #[error("particle packing failed after {attempts} attempts; use a larger canvas or fewer particles")]
    Density { attempts: usize },

    #[error("phantom spec error: {0}")]
    Spec(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics rather than inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteLoss { .. }
                | Error::Divergence(_)
                | Error::Integration { .. }
                | Error::SingularNoise
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
