//! Pairwise knowledge fusion on a toy language model.
//!
//! [`fuse_mince`] picks, per instruction, the pivot or projected source
//! distribution matrix closer to the gold response. [`train_pairwise_fusion`]
//! then fine-tunes a copy of the pivot on `λ·L_sft + (1−λ)·L_fusion` with
//! full-batch gradient descent and analytic gradients.

mod loss;
mod model;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distribution::DistError;

pub use loss::{
    combined_loss, combined_objective, fuse_mince, fusion_loss, sft_loss, CombinedLoss, FusedSide,
    LossGrad, MinCe,
};
pub use model::{
    log_softmax, SupervisedExample, ToyLm, ToyLmDims, EMBEDDING, EMPTY_CONTEXT, HIDDEN_BIAS,
    HIDDEN_WEIGHT, OUTPUT_BIAS, OUTPUT_WEIGHT,
};
pub use train::{
    mean_fusion_cross_entropy, model_distributions, select_fused_targets, train_pairwise_fusion,
    train_sft, EpochLoss, FusedTargets, TrainConfig, TrainOutcome, DEFAULT_EPOCHS,
    DEFAULT_LEARNING_RATE,
};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid example: {0}")]
    InvalidExample(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("fusion weight must lie in [0, 1], got {0}")]
    InvalidLambda(f64),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Dist(#[from] DistError),
}

/// Mixing weight `λ` between the supervised and fusion losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct FusionWeight(f64);

impl FusionWeight {
    pub const DEFAULT: FusionWeight = FusionWeight(0.9);

    pub fn new(lambda: f64) -> Result<Self, FusionError> {
        if (0.0..=1.0).contains(&lambda) {
            Ok(Self(lambda))
        } else {
            Err(FusionError::InvalidLambda(lambda))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for FusionWeight {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl TryFrom<f64> for FusionWeight {
    type Error = FusionError;

    fn try_from(v: f64) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<FusionWeight> for f64 {
    fn from(w: FusionWeight) -> f64 {
        w.0
    }
}
