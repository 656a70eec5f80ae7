use crate::numcore::{conv2d_output_size, pool2d_output_size, NumError, Parameter, PoolKind, Tape, Var};

use super::params::{BranchParams, CbamParams, NormParams};
use super::{Activation, LayerContext, ModelError};

pub(crate) const GAP: (usize, usize, usize) = (4, 4, 2);
pub(crate) const CONV1: (usize, usize, usize, usize) = (64, 9, 2, 4);
pub(crate) const POOL1: (usize, usize, usize) = (4, 4, 2);
pub(crate) const CONV2: (usize, usize, usize, usize) = (20, 3, 2, 1);
pub(crate) const POOL2: (usize, usize, usize) = (2, 2, 1);
pub(crate) const SPATIAL_KERNEL: usize = 7;
const NORM_EPS: f64 = 1e-5;

/// Maps a parameter to the tape variable that stands for it.
pub(crate) type Binder<'a, 'b> = &'b mut dyn FnMut(&mut Tape<'a>, &'a Parameter) -> Var;

pub(crate) fn bind_params<'a>() -> impl FnMut(&mut Tape<'a>, &'a Parameter) -> Var {
    |tape, p| tape.param(p)
}

/// Output extent of one branch layer, as C×H×W.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub layer: &'static str,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LayerShape {
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Walks the branch chain for a `width`×`height` quadrant and reports the
/// output shape of each layer.
pub fn branch_shapes(width: usize, height: usize) -> Result<Vec<LayerShape>, ModelError> {
    fn step(
        layer: &'static str,
        prev: (usize, usize),
        k: usize,
        s: usize,
        p: usize,
        conv: bool,
    ) -> Result<(usize, usize), ModelError> {
        if prev.0 == 0 || prev.1 == 0 {
            return Err(ModelError::Layer {
                layer,
                source: NumError::Shape { op: "branch", detail: format!("empty {}×{} input", prev.1, prev.0) },
            });
        }
        let f = if conv { conv2d_output_size } else { pool2d_output_size };
        let err = || ModelError::Layer {
            layer,
            source: NumError::Shape {
                op: if conv { "conv2d" } else { "pool2d" },
                detail: format!("{k}×{k} window does not fit a {}×{} input", prev.0, prev.1),
            },
        };
        Ok((f(prev.0, k, s, p).ok_or_else(err)?, f(prev.1, k, s, p).ok_or_else(err)?))
    }
    let mut out = Vec::with_capacity(5);
    let hw = step("gap", (height, width), GAP.0, GAP.1, GAP.2, false)?;
    out.push(LayerShape { layer: "gap", channels: 2, height: hw.0, width: hw.1 });
    let hw = step("conv1", hw, CONV1.1, CONV1.2, CONV1.3, true)?;
    out.push(LayerShape { layer: "conv1", channels: CONV1.0, height: hw.0, width: hw.1 });
    let hw = step("avgpool1", hw, POOL1.0, POOL1.1, POOL1.2, false)?;
    out.push(LayerShape { layer: "avgpool1", channels: CONV1.0, height: hw.0, width: hw.1 });
    let hw = step("conv2", hw, CONV2.1, CONV2.2, CONV2.3, true)?;
    out.push(LayerShape { layer: "conv2", channels: CONV2.0, height: hw.0, width: hw.1 });
    let hw = step("avgpool2", hw, POOL2.0, POOL2.1, POOL2.2, false)?;
    out.push(LayerShape { layer: "avgpool2", channels: CONV2.0, height: hw.0, width: hw.1 });
    Ok(out)
}

/// Length of one branch feature `vec(FE1) ⊕ vec(FE2)`.
pub fn branch_feature_len(width: usize, height: usize) -> Result<usize, ModelError> {
    let s = branch_shapes(width, height)?;
    Ok(s[2].numel() + s[4].numel())
}

/// Channel gate from a shared two-layer MLP over global average and max
/// pools, followed by a spatial gate from a 7×7 convolution over the
/// channel-wise mean and max maps.
pub fn cbam_forward<'a>(tape: &mut Tape<'a>, x: Var, p: &'a CbamParams) -> Result<Var, NumError> {
    cbam_with(tape, x, p, &mut bind_params())
}

pub(crate) fn cbam_with<'a>(tape: &mut Tape<'a>, x: Var, p: &'a CbamParams, bind: Binder<'a, '_>) -> Result<Var, NumError> {
    let c = tape.value(x).shape()[0];
    let w1 = bind(tape, &p.mlp1_w);
    let b1 = bind(tape, &p.mlp1_b);
    let w2 = bind(tape, &p.mlp2_w);
    let b2 = bind(tape, &p.mlp2_b);

    let mlp = |tape: &mut Tape<'a>, v: Var| -> Result<Var, NumError> {
        let h = tape.dense(v, w1, b1)?;
        let h = tape.relu(h)?;
        tape.dense(h, w2, b2)
    };
    let avg = tape.global_pool(x, PoolKind::Average)?;
    let max = tape.global_pool(x, PoolKind::Max)?;
    let ya = mlp(tape, avg)?;
    let ym = mlp(tape, max)?;
    let logits = tape.add(ya, ym)?;
    let gate = tape.sigmoid(logits)?;
    let gate = tape.reshape(gate, &[c, 1, 1])?;
    let xc = tape.mul(x, gate)?;

    let mean = tape.channel_pool(xc, PoolKind::Average)?;
    let maxc = tape.channel_pool(xc, PoolKind::Max)?;
    let stacked = tape.concat(&[mean, maxc], 0)?;
    let k = bind(tape, &p.spatial_k);
    let b = bind(tape, &p.spatial_b);
    let s = tape.conv2d(stacked, k, b, 1, SPATIAL_KERNEL / 2)?;
    let s = tape.sigmoid(s)?;
    tape.mul(xc, s)
}

fn activate(tape: &mut Tape<'_>, x: Var, act: Activation) -> Result<Var, NumError> {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Identity => Ok(x),
    }
}

fn norm<'a>(tape: &mut Tape<'a>, x: Var, p: Option<&'a NormParams>, bind: Binder<'a, '_>) -> Result<Var, NumError> {
    match p {
        Some(n) => {
            let g = bind(tape, &n.gamma);
            let b = bind(tape, &n.beta);
            tape.channel_norm(x, g, b, NORM_EPS)
        }
        None => Ok(x),
    }
}

/// One quadrant branch; `input` is a 2×H×W flow tensor already divided by the
/// flow scale. Returns the flat branch feature.
pub fn branch_forward<'a>(
    tape: &mut Tape<'a>,
    input: Var,
    p: &'a BranchParams,
    act: Activation,
) -> Result<Var, ModelError> {
    branch_with(tape, input, p, act, &mut bind_params())
}

pub(crate) fn branch_with<'a>(
    tape: &mut Tape<'a>,
    input: Var,
    p: &'a BranchParams,
    act: Activation,
    bind: Binder<'a, '_>,
) -> Result<Var, ModelError> {
    let g = tape.pool2d(input, PoolKind::Average, GAP.0, GAP.1, GAP.2).layer("gap")?;

    let k1 = bind(tape, &p.conv1_k);
    let b1 = bind(tape, &p.conv1_b);
    let c1 = tape.conv2d(g, k1, b1, CONV1.2, CONV1.3).layer("conv1")?;
    let c1 = norm(tape, c1, p.norm1.as_ref(), bind).layer("norm1")?;
    let a1 = activate(tape, c1, act).layer("act1")?;
    let m1 = cbam_with(tape, a1, &p.cbam1, bind).layer("cbam1")?;
    let fe1 = tape.pool2d(m1, PoolKind::Average, POOL1.0, POOL1.1, POOL1.2).layer("avgpool1")?;

    let k2 = bind(tape, &p.conv2_k);
    let b2 = bind(tape, &p.conv2_b);
    let c2 = tape.conv2d(fe1, k2, b2, CONV2.2, CONV2.3).layer("conv2")?;
    let c2 = norm(tape, c2, p.norm2.as_ref(), bind).layer("norm2")?;
    let a2 = activate(tape, c2, act).layer("act2")?;
    let m2 = cbam_with(tape, a2, &p.cbam2, bind).layer("cbam2")?;
    let fe2 = tape.pool2d(m2, PoolKind::Average, POOL2.0, POOL2.1, POOL2.2).layer("avgpool2")?;

    let f1 = tape.flatten(fe1).layer("concat")?;
    let f2 = tape.flatten(fe2).layer("concat")?;
    tape.concat(&[f1, f2], 0).layer("concat")
}
