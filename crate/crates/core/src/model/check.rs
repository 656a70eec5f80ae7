use std::collections::HashMap;

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numcore::{grad_check_report, invalid, GradCheckOptions, GradCheckReport, NumError, Parameter, Tape, Tensor, Var};

use super::layers::{branch_with, cbam_with};
use super::params::{BranchParams, CbamParams, HeadParams};
use super::{ModelConfig, ModelError};

/// Quadrant size used by [`network_grad_check`].
pub const CHECK_QUADRANT: (usize, usize) = (48, 40);

fn redraw(rng: &mut ChaCha8Rng, p: &Parameter) -> Tensor {
    let s = p.value.shape();
    let data = if s.len() >= 2 {
        // fan-in scaling keeps activations O(1) through every layer, which
        // keeps the deep gradients well above finite-difference roundoff
        let fan_in: usize = s[1..].iter().product();
        let b = (3.0 / fan_in as f64).sqrt();
        let d = Uniform::new_inclusive(-b, b);
        (0..p.numel()).map(|_| d.sample(rng)).collect()
    } else {
        (0..p.numel()).map(|_| rng.gen_range(-0.1..0.1)).collect()
    };
    Tensor::new(s, data).expect("shape preserved").with_requires_grad(true)
}

/// Checks `net` with its input and every parameter in `template` as probed
/// leaves, under a squared error against a target near the current output.
fn leaf_check<'a, F>(
    opts: GradCheckOptions,
    template: &[&'a Parameter],
    input_shape: &[usize],
    input_range: f64,
    net: F,
) -> Result<GradCheckReport, NumError>
where
    F: Fn(&mut Tape<'a>, Var, &mut dyn FnMut(&mut Tape<'a>, &'a Parameter) -> Var) -> Result<Var, NumError>,
{
    let index: HashMap<&str, usize> = template.iter().enumerate().map(|(i, p)| (p.name.as_str(), i + 1)).collect();
    let make = |r: &mut ChaCha8Rng| {
        let mut v = Vec::with_capacity(template.len() + 2);
        let n: usize = input_shape.iter().product();
        let x: Vec<f64> = (0..n).map(|_| r.gen_range(-input_range..input_range)).collect();
        v.push(Tensor::new(input_shape, x).unwrap().with_requires_grad(true));
        v.extend(template.iter().map(|p| redraw(r, p)));
        // Target a small offset from the current output: finite-difference
        // roundoff scales with the loss value, the gradient only with the
        // residual.
        let mut tape = Tape::new();
        let vars: Vec<Var> = v.iter().map(|t| tape.leaf(t.clone())).collect();
        let mut bind = |_: &mut Tape<'a>, p: &'a Parameter| vars[index[p.name.as_str()]];
        let y = net(&mut tape, vars[0], &mut bind).expect("forward on fresh draw");
        let y = tape.value(y);
        let target: Vec<f64> = y.data().iter().map(|&a| a + r.gen_range(-0.02..0.02)).collect();
        v.push(Tensor::new(y.shape(), target).unwrap());
        v
    };
    grad_check_report(opts, make, |tape, vars: &[Var]| -> Result<Var, NumError> {
        let mut bind = |_: &mut Tape<'a>, p: &'a Parameter| vars[index[p.name.as_str()]];
        let y = net(tape, vars[0], &mut bind)?;
        let d = tape.sub(y, vars[vars.len() - 1])?;
        let sq = tape.mul(d, d)?;
        tape.sum(sq)
    })
}

/// Finite-difference check through one full branch (flow input, every
/// branch parameter), the head and a squared-error loss. Each trial draws a
/// fresh flow input, parameters and target.
pub fn network_grad_check(opts: GradCheckOptions, cfg: &ModelConfig) -> Result<GradCheckReport, ModelError> {
    let (qw, qh) = CHECK_QUADRANT;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let branch = BranchParams::init(&mut rng, 0, cfg);
    let feat = super::branch_feature_len(qw, qh)?;
    let head = HeadParams::init(&mut rng, feat, &[12, 6]);
    let mut template: Vec<&Parameter> = Vec::new();
    branch.collect(&mut template);
    for (w, b) in &head.layers {
        template.extend([w, b]);
    }
    let act = cfg.activation;
    Ok(leaf_check(opts, &template, &[2, qh, qw], 3.0, |tape, x, bind| {
        let feats = branch_with(tape, x, &branch, act, bind).map_err(to_num)?;
        head.forward_with(tape, feats, 0.0, None, bind).map_err(to_num)
    })?)
}

/// Check of one attention block on a C×H×W input, over the input and all
/// six block parameters.
pub fn cbam_grad_check(
    opts: GradCheckOptions,
    channels: usize,
    reduction: usize,
    height: usize,
    width: usize,
) -> Result<GradCheckReport, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let p = CbamParams::init(&mut rng, "cbam", channels, reduction);
    let mut template = Vec::new();
    p.collect(&mut template);
    Ok(leaf_check(opts, &template, &[channels, height, width], 2.0, |tape, x, bind| {
        cbam_with(tape, x, &p, bind)
    })?)
}

/// Check of the regression head alone, over its input feature and weights.
pub fn head_grad_check(opts: GradCheckOptions, input: usize, hidden: &[usize]) -> Result<GradCheckReport, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let head = HeadParams::init(&mut rng, input, hidden);
    let template: Vec<&Parameter> = head.layers.iter().flat_map(|(w, b)| [w, b]).collect();
    Ok(leaf_check(opts, &template, &[input], 2.0, |tape, x, bind| {
        head.forward_with(tape, x, 0.0, None, bind).map_err(to_num)
    })?)
}

fn to_num(e: ModelError) -> NumError {
    match e {
        ModelError::Layer { source, .. } => source,
        other => invalid("network", other.to_string()),
    }
}

impl From<NumError> for ModelError {
    fn from(source: NumError) -> Self {
        ModelError::Layer { layer: "loss", source }
    }
}

