//! Counterfactual outcome estimation over time.
//!
//! A causal sequence network (LSTM or TCN) encodes each history into a
//! representation that is autoencoded, balanced against the next treatment by
//! an entropy-maximisation game, and conditioned on the planned treatment by
//! feature-wise affine modulation before outcome decoding. The crate also ships
//! two simulators with counterfactual ground truth, the evaluation protocols
//! built on them, and exact checks of the divergence identities behind the
//! balancing objective.

pub mod backbone;
pub mod batch;
pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod gradsuite;
pub mod loss;
pub mod model;
pub mod probe;
pub mod sim;
pub mod theory;
pub mod train;

pub use caetc_autodiff as autodiff;

use caetc_autodiff::AutodiffError;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed record: {0}")]
    Format(String),
}

impl CoreError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// True for failures caused by non-finite arithmetic rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Self::Numeric(_) | Self::Autodiff(AutodiffError::NonFinite(_))
        )
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
