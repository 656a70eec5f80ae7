use crate::numcore::{Parameter, Tensor};

use super::{TrainConfig, TrainError};

/// First and second moment estimates, one pair per parameter, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub names: Vec<String>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[&Parameter]) -> Self {
        Self {
            step: 0,
            names: params.iter().map(|p| p.name.clone()).collect(),
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    fn check(&self, params: &[&mut Parameter]) -> Result<(), TrainError> {
        if params.len() != self.m.len() {
            return Err(TrainError::StateMismatch {
                name: "*".into(),
                detail: format!("{} parameters vs {} moment slots", params.len(), self.m.len()),
            });
        }
        for (i, p) in params.iter().enumerate() {
            let mismatch = |detail: String| TrainError::StateMismatch { name: p.name.clone(), detail };
            if self.names[i] != p.name {
                return Err(mismatch(format!("slot holds {}", self.names[i])));
            }
            if self.m[i].shape() != p.value.shape() || self.v[i].shape() != p.value.shape() {
                return Err(mismatch(format!("moment shape {:?} vs {:?}", self.m[i].shape(), p.value.shape())));
            }
            if p.grad.shape() != p.value.shape() {
                return Err(mismatch(format!("gradient shape {:?}", p.grad.shape())));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update from each parameter's `grad` buffer.
/// Nothing is modified if any gradient is non-finite.
pub fn adam_step(params: &mut [&mut Parameter], state: &mut AdamState, lr: f64, cfg: &TrainConfig) -> Result<(), TrainError> {
    state.check(params)?;
    if let Some(p) = params.iter().find(|p| !p.grad.all_finite()) {
        return Err(TrainError::NonFiniteGradient(p.name.clone()));
    }
    state.step += 1;
    let t = state.step.min(i32::MAX as u64) as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = p.grad.data();
        let theta = p.value.data_mut();
        for j in 0..theta.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            theta[j] -= lr * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}
