use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::batch_indices;
use crate::flow::FlowField;
use crate::geometry::PoseIncrement;
use crate::model::{split_quadrants, DeepAvo, ModelConfig, ModelError, PosePrediction};
use crate::numcore::{NumError, Tape, Tensor};
use crate::Exec;

use super::{adam_step, loss, loss_on_tape, AdamState, Checkpoint, HistorySummary, TrainConfig, TrainError};

/// Network-ready quadrant tensors with their ground-truth increment.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub inputs: [Tensor; 4],
    pub gt: PoseIncrement,
}

impl TrainSample {
    pub fn from_flow(flow: &FlowField, gt: PoseIncrement, cfg: &ModelConfig) -> Result<Self, TrainError> {
        let qs = split_quadrants(flow)?;
        Ok(Self {
            inputs: qs.to_tensors(cfg.flow_scale),
            gt,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// `epoch,train_loss,val_loss,lr` with shortest round-trip floats.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr\n");
        for r in &self.epochs {
            s.push_str(&format!("{},{:?},{:?},{:?}\n", r.epoch, r.train_loss, r.val_loss, r.lr));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: DeepAvo,
    pub checkpoint: Checkpoint,
    pub history: History,
    pub diverged: bool,
    pub steps: usize,
}

/// Seeded split of `0..n` into `(train, validation)`. A zero fraction, or a
/// dataset too small to spare a sample, validates on the training indices.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let k = (fraction * n as f64).round() as usize;
    if fraction <= 0.0 || n < 2 {
        let all: Vec<usize> = (0..n).collect();
        return (all.clone(), all);
    }
    let k = k.clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5641_4C49_4441_5445));
    let mut val = order[..k].to_vec();
    let mut train = order[k..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Splits `samples` with `cfg.val_fraction` and fits.
pub fn fit(samples: &[TrainSample], model: DeepAvo, cfg: &TrainConfig, exec: Exec) -> Result<FitResult, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (tr, va) = split_validation(samples.len(), cfg.val_fraction, cfg.seed);
    let train: Vec<TrainSample> = tr.iter().map(|&i| samples[i].clone()).collect();
    let val: Vec<TrainSample> = va.iter().map(|&i| samples[i].clone()).collect();
    fit_with_validation(&train, &val, model, cfg, exec)
}

pub(crate) fn predict_all(model: &DeepAvo, samples: &[TrainSample], exec: Exec) -> Result<Vec<PosePrediction>, ModelError> {
    exec.map(samples.len(), |i| model.predict_tensors(&samples[i].inputs))
        .into_iter()
        .collect()
}

fn eval_loss(model: &DeepAvo, samples: &[TrainSample], alpha: f64, exec: Exec) -> Result<f64, TrainError> {
    let preds = predict_all(model, samples, exec)?;
    let gts: Vec<PoseIncrement> = samples.iter().map(|s| s.gt).collect();
    loss(&preds, &gts, alpha)
}

type SampleGrad = (f64, HashMap<String, Tensor>);

fn sample_grad(model: &DeepAvo, s: &TrainSample, cfg: &TrainConfig, scale: f64, rng: Option<ChaCha8Rng>) -> Result<SampleGrad, TrainError> {
    let mut tape = Tape::new();
    let x = model.features_on_tape(&mut tape, &s.inputs)?;
    let mut rng = rng;
    let y = model.head.forward(&mut tape, x, cfg.dropout, rng.as_mut())?;
    let l = loss_on_tape(&mut tape, &[y], &[s.gt], cfg.alpha)?;
    let l = tape.scale(l, scale)?;
    let value = tape.value(l).data()[0];
    let grads = tape.backward(l)?;
    let map = grads
        .params()
        .filter_map(|(n, g)| g.map(|g| (n.to_string(), g.clone())))
        .collect();
    Ok((value, map))
}

fn is_divergence(e: &TrainError) -> bool {
    matches!(
        e,
        TrainError::NonFiniteGradient(_)
            | TrainError::Num(NumError::NonFinite { .. })
            | TrainError::Model(ModelError::Layer { source: NumError::NonFinite { .. }, .. })
    )
}

/// Mini-batch Adam with step-halving rate and early stopping on `val`.
///
/// Per-sample gradients may be computed concurrently; they are summed in
/// batch order, so results do not depend on `exec`.
pub fn fit_with_validation(
    train: &[TrainSample],
    val: &[TrainSample],
    mut model: DeepAvo,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<FitResult, TrainError> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut adam = AdamState::new(&model.params());
    let mut history = History::default();
    let mut best: Option<(f64, usize, DeepAvo, AdamState)> = None;
    let mut wait = 0usize;
    let mut steps = 0usize;
    let mut diverged = false;
    let mut last_train = f64::NAN;
    let step_cap = cfg.max_steps.unwrap_or(usize::MAX);
    let mut stream_rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    'epochs: for epoch in 0..cfg.max_epochs {
        if steps >= step_cap {
            break;
        }
        let lr = cfg.lr_at(epoch);
        let batches = batch_indices(train.len(), cfg.batch_size, cfg.seed.wrapping_add(epoch as u64))
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch in &batches {
            if steps >= step_cap {
                break;
            }
            let scale = 1.0 / batch.len() as f64;
            let rngs: Vec<Option<ChaCha8Rng>> = batch
                .iter()
                .map(|_| {
                    (cfg.dropout > 0.0).then(|| {
                        ChaCha8Rng::from_rng(&mut stream_rng).expect("chacha reseed")
                    })
                })
                .collect();
            let results = exec.map(batch.len(), |k| sample_grad(&model, &train[batch[k]], cfg, scale, rngs[k].clone()));
            let mut batch_loss = 0.0;
            for p in model.params_mut() {
                p.zero_grad();
            }
            let mut failed = None;
            for r in results {
                match r {
                    Ok((l, g)) => {
                        batch_loss += l;
                        for p in model.params_mut() {
                            if let Some(t) = g.get(&p.name) {
                                for (a, b) in p.grad.data_mut().iter_mut().zip(t.data()) {
                                    *a += b;
                                }
                            }
                        }
                    }
                    Err(e) => {
                        failed = Some(e);
                        break;
                    }
                }
            }
            if let Some(e) = failed {
                if is_divergence(&e) {
                    diverged = true;
                    break 'epochs;
                }
                return Err(e);
            }
            if !batch_loss.is_finite() {
                diverged = true;
                break 'epochs;
            }
            let mut params = model.params_mut();
            match adam_step(&mut params, &mut adam, lr, cfg) {
                Ok(()) => {}
                Err(e) if is_divergence(&e) => {
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            steps += 1;
            epoch_loss += batch_loss * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = epoch_loss / seen.max(1) as f64;
        let val_loss = match eval_loss(&model, val, cfg.alpha, exec) {
            Ok(v) if v.is_finite() => v,
            Ok(_) => {
                diverged = true;
                break;
            }
            Err(e) if is_divergence(&e) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        last_train = train_loss;
        history.epochs.push(EpochRecord { epoch, train_loss, val_loss, lr });
        if best.as_ref().is_none_or(|b| val_loss < b.0) {
            let mut snap = model.clone();
            snap.params_mut().into_iter().for_each(|p| p.zero_grad());
            best = Some((val_loss, epoch, snap, adam.clone()));
            wait = 0;
        } else {
            wait += 1;
            if wait > cfg.patience {
                break;
            }
        }
    }

    let (best_val, best_epoch, best_model, best_adam) = match best {
        Some((v, e, m, a)) => (Some(v), Some(e), m, a),
        None => {
            let a = AdamState::new(&model.params());
            (None, None, model, a)
        }
    };
    let summary = HistorySummary {
        epochs_run: history.epochs.len(),
        best_epoch,
        best_val_loss: best_val,
        final_train_loss: last_train.is_finite().then_some(last_train),
        steps,
        diverged,
    };
    let checkpoint = Checkpoint::from_model(&best_model, Some(&best_adam), best_epoch.map_or(0, |e| e + 1), summary);
    Ok(FitResult {
        model: best_model,
        checkpoint,
        history,
        diverged,
        steps,
    })
}
