//! Loss, Adam, step-halving schedule, early-stopped fitting and checkpoints.

mod adam;
mod checkpoint;
mod fit;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, HistorySummary, CKPT_MAGIC, CKPT_VERSION};
pub use fit::{fit, fit_with_validation, split_validation, EpochRecord, FitResult, History, TrainSample};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::PoseIncrement;
use crate::model::{ModelError, PosePrediction};
use crate::numcore::{NumError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch length mismatch: {preds} predictions vs {gts} targets")]
    BatchMismatch { preds: usize, gts: usize },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("optimizer state does not match parameter {name}: {detail}")]
    StateMismatch { name: String, detail: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the heading channel in the loss.
    pub alpha: f64,
    pub lr0: f64,
    /// The rate halves every `halving_period` epochs.
    pub halving_period: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Held-out share for early stopping. Zero validates on the training set.
    pub val_fraction: f64,
    /// Optional cap on optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 100.0,
            lr0: 1e-4,
            halving_period: 15,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            batch_size: 48,
            max_epochs: 70,
            patience: 10,
            dropout: 0.5,
            seed: 0,
            val_fraction: 0.1,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    /// Small-scale schedule for the 64-sample synthetic set: a larger rate,
    /// no dropout, and validation on the training samples themselves.
    pub fn desk() -> Self {
        Self {
            lr0: 1e-3,
            halving_period: 60,
            batch_size: 8,
            max_epochs: 250,
            patience: 250,
            dropout: 0.0,
            val_fraction: 0.0,
            max_steps: Some(2000),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha = {} must be positive", self.alpha));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 = {} must be positive", self.lr0));
        }
        for (n, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{n} = {b} must lie in (0, 1)"));
            }
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon = {} must be positive", self.epsilon));
        }
        if self.batch_size == 0 || self.halving_period == 0 || self.max_epochs == 0 {
            return bad("batch_size, halving_period and max_epochs must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout = {} must lie in [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction = {} must lie in [0, 1)", self.val_fraction));
        }
        Ok(())
    }

    /// `lr0 · 0.5^floor(epoch / halving_period)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_schedule(self.lr0, self.halving_period, epoch)
    }
}

pub fn lr_schedule(lr0: f64, period: usize, epoch: usize) -> f64 {
    let halvings = (epoch / period.max(1)).min(i32::MAX as usize) as i32;
    lr0 * 0.5f64.powi(halvings)
}

fn check_batch(preds: usize, gts: usize) -> Result<(), TrainError> {
    if preds != gts {
        return Err(TrainError::BatchMismatch { preds, gts });
    }
    if preds == 0 {
        return Err(TrainError::EmptyBatch);
    }
    Ok(())
}

/// Mean over the batch of `(dp̂ - dp)² + alpha·(dφ̂ - dφ)²`.
pub fn loss(preds: &[PosePrediction], gts: &[PoseIncrement], alpha: f64) -> Result<f64, TrainError> {
    check_batch(preds.len(), gts.len())?;
    let sum: f64 = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| (p.dp - g.dp).powi(2) + alpha * (p.dphi - g.dphi).powi(2))
        .sum();
    Ok(sum / preds.len() as f64)
}

/// Differentiable loss over length-2 prediction nodes.
pub fn loss_on_tape(tape: &mut Tape<'_>, preds: &[Var], gts: &[PoseIncrement], alpha: f64) -> Result<Var, TrainError> {
    check_batch(preds.len(), gts.len())?;
    let n = preds.len() as f64;
    let weights = tape.constant(Tensor::vector(vec![1.0 / n, alpha / n]));
    let mut total: Option<Var> = None;
    for (&p, g) in preds.iter().zip(gts) {
        let target = tape.constant(Tensor::vector(vec![g.dp, g.dphi]));
        let d = tape.sub(p, target)?;
        let sq = tape.mul(d, d)?;
        let w = tape.mul(sq, weights)?;
        let s = tape.sum(w)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(total.expect("batch is non-empty"))
}

/// Per-channel mean squared errors `(dp, dphi)`.
pub fn channel_mse(preds: &[PosePrediction], gts: &[PoseIncrement]) -> Result<(f64, f64), TrainError> {
    check_batch(preds.len(), gts.len())?;
    let n = preds.len() as f64;
    let (a, b) = preds.iter().zip(gts).fold((0.0, 0.0), |(a, b), (p, g)| {
        (a + (p.dp - g.dp).powi(2), b + (p.dphi - g.dphi).powi(2))
    });
    Ok((a / n, b / n))
}

#[cfg(test)]
mod tests;
