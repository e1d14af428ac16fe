//! Dense networks, single-head graph attention, reverse-mode gradients and Adam.
//!
//! Gradients are written out by hand for the two fixed architectures (plain
//! MLP, history-encoder + attention + head) and are checked against central
//! finite differences in the test suite.

mod adam;
mod gat;
mod io;
mod mlp;
mod train;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point2;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gat::{gat_encode, gat_loss_grad, gat_predict, GatEncoding, GatWeights};
pub use io::{load_weights, save_weights, WEIGHTS_FORMAT_VERSION};
pub use mlp::{mlp_forward, mlp_loss_grad, Activation, DenseLayer, MlpCache, MlpWeights, LEAKY_SLOPE};
pub use train::{train_predictor, PredictorKind, PredictorWeights, TrainConfig, TrainOutcome};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("scene has no agents")]
    EmptyScene,
    #[error("no training samples")]
    EmptyDataset,
    #[error("training diverged in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("weights file dims disagree with header: {0}")]
    DimMismatch(String),
    #[error("expected {expected} weights, found {found}")]
    KindMismatch { expected: PredictorKind, found: PredictorKind },
    #[error("unsupported weights format version {found}")]
    Version { found: u64 },
    #[error("cannot parse weights: {0}")]
    Parse(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Row-major dense array of finite `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NnError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NnError::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("tensor"));
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Result<Self, NnError> {
        Self::new(vec![data.len()], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// The `H - 1` consecutive displacements of `history`, multiplied by `scale`,
/// flattened as `[dx0, dy0, dx1, dy1, ...]`.
pub fn history_features(history: &[Point2], scale: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * history.len().saturating_sub(1));
    for w in history.windows(2) {
        out.push((w[1].x - w[0].x) * scale);
        out.push((w[1].y - w[0].y) * scale);
    }
    out
}
