//! Training objectives, optimizers and the training loop.
//!
//! Every loss returns its value together with the exact analytic gradient
//! with respect to the trainable policy's logits, as a [`SparseGrad`] that
//! only touches the rows on the responses' paths.
//!
//! [`SparseGrad`]: crate::policy::SparseGrad

mod loss;
mod optim;
mod train;

pub use loss::{
    dpo_loss, dpo_lw_loss, implicit_reward, modpo_loss, nll_dpo_loss, DpoObjective, LossGrad, LwObjective,
    ModpoObjective, NllDpoObjective, PairObjective, RealignPair,
};
pub use optim::{Adam, OptimizerKind, Sgd};
pub use train::{soups_align, train, write_trace_csv, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Exec;

/// How a DPO-trained policy scores a response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImplicitRewardMode {
    /// `beta * (log pi_i(y|x) - log pi_ref(y|x))`.
    #[default]
    DpoRatio,
    /// `beta * log pi_i(y|x)`, the reference term dropped.
    PolicyLogprob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub beta: f64,
    pub alpha: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub optimizer: OptimizerKind,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            alpha: 0.1,
            learning_rate: 0.05,
            steps: 500,
            optimizer: OptimizerKind::default(),
            batch_size: None,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// `-log sigmoid(x)`, stable for large `|x|`.
pub(crate) fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
