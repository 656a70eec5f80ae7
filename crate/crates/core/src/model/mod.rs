//! Quadrant-branch flow encoder with channel/spatial attention and a fully
//! connected pose head.
//!
//! Each of the four flow quadrants runs through its own branch:
//!
//! ```text
//! avgpool 4x4/4 pad 2 → conv 9x9/2 pad 4, 64 ch → act → CBAM → avgpool 4x4/4 pad 2   (FE1)
//!                     → conv 3x3/2 pad 1, 20 ch → act → CBAM → avgpool 2x2/2 pad 1   (FE2)
//! ```
//!
//! The branch feature is `vec(FE1) ⊕ vec(FE2)`; the four branch features are
//! concatenated in quadrant order and regressed to `(dp, dphi)`.

mod check;
mod layers;
mod params;
mod quadrant;

pub use check::{cbam_grad_check, head_grad_check, network_grad_check, CHECK_QUADRANT};
pub use layers::{branch_feature_len, branch_forward, branch_shapes, cbam_forward, LayerShape};
pub use params::{BranchParams, CbamParams, DeepAvo, HeadParams, NormParams};
pub use quadrant::{split_quadrants, QuadrantSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::NumError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("layer {layer}: {source}")]
    Layer {
        layer: &'static str,
        #[source]
        source: NumError,
    },
    #[error("cannot split a {0}×{1} field into quadrants")]
    Degenerate(usize, usize),
    #[error("quadrant {got_w}×{got_h} does not match the configured {want_w}×{want_h}")]
    InputSize {
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("head expects {expected} features, branches produced {got}")]
    FeatureMismatch { expected: usize, got: usize },
}

pub(crate) trait LayerContext<T> {
    fn layer(self, name: &'static str) -> Result<T, ModelError>;
}

impl<T> LayerContext<T> for Result<T, NumError> {
    fn layer(self, name: &'static str) -> Result<T, ModelError> {
        self.map_err(|source| ModelError::Layer { layer: name, source })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// Hyperparameters the architecture leaves open.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channel-MLP reduction ratio; must divide 64 and 20.
    pub cbam_reduction: usize,
    pub activation: Activation,
    /// Dropout after each hidden head layer (training only).
    pub dropout: f64,
    /// Flow vectors are divided by this before entering the network.
    pub flow_scale: f64,
    /// Full flow-field size fed to [`split_quadrants`].
    pub input_width: usize,
    pub input_height: usize,
    pub head_hidden: Vec<usize>,
    /// Per-channel normalization after each convolution.
    pub channel_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            cbam_reduction: 4,
            activation: Activation::Relu,
            dropout: 0.5,
            flow_scale: 10.0,
            input_width: 1226,
            input_height: 370,
            head_hidden: vec![256, 64],
            channel_norm: false,
        }
    }
}

impl ModelConfig {
    /// Desk-scale defaults for 256×96 synthetic sequences.
    pub fn desk() -> Self {
        Self {
            input_width: 256,
            input_height: 96,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let r = self.cbam_reduction;
        if r == 0 || 64 % r != 0 || 20 % r != 0 {
            return Err(ModelError::Config(format!("reduction ratio {r} must divide 64 and 20")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.flow_scale > 0.0 && self.flow_scale.is_finite()) {
            return Err(ModelError::Config("flow scale must be positive".into()));
        }
        if self.input_width < 2 || self.input_height < 2 {
            return Err(ModelError::Config("input must be at least 2×2".into()));
        }
        if self.head_hidden.contains(&0) {
            return Err(ModelError::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// Quadrant size after the even crop.
    pub fn quadrant_size(&self) -> (usize, usize) {
        (self.input_width / 2, self.input_height / 2)
    }
}

/// Raw network output; `dp` is not clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosePrediction {
    pub dp: f64,
    pub dphi: f64,
}
