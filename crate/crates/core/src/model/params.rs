use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::numcore::{Parameter, Tape, Tensor, Var};

use super::layers::{bind_params, branch_feature_len, branch_forward, Binder, CONV1, CONV2, SPATIAL_KERNEL};
use super::{LayerContext, ModelConfig, ModelError, PosePrediction, QuadrantSet};

/// Xavier/Glorot uniform: `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`.
fn xavier(rng: &mut ChaCha8Rng, name: String, shape: &[usize], fan_in: usize, fan_out: usize) -> Parameter {
    let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-b, b);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Parameter::new(name, Tensor::new(shape, data).expect("non-empty shape"))
}

fn conv_param(rng: &mut ChaCha8Rng, name: String, o: usize, c: usize, k: usize) -> Parameter {
    xavier(rng, name, &[o, c, k, k], c * k * k, o * k * k)
}

fn dense_param(rng: &mut ChaCha8Rng, name: String, out: usize, inp: usize) -> Parameter {
    xavier(rng, name, &[out, inp], inp, out)
}

fn zeros(name: String, shape: &[usize]) -> Parameter {
    Parameter::new(name, Tensor::zeros(shape))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CbamParams {
    pub mlp1_w: Parameter,
    pub mlp1_b: Parameter,
    pub mlp2_w: Parameter,
    pub mlp2_b: Parameter,
    /// 1×2×7×7 spatial kernel over (mean, max).
    pub spatial_k: Parameter,
    pub spatial_b: Parameter,
}

impl CbamParams {
    pub fn init(rng: &mut ChaCha8Rng, prefix: &str, channels: usize, reduction: usize) -> Self {
        let hidden = channels / reduction;
        Self {
            mlp1_w: dense_param(rng, format!("{prefix}/mlp1/weight"), hidden, channels),
            mlp1_b: zeros(format!("{prefix}/mlp1/bias"), &[hidden]),
            mlp2_w: dense_param(rng, format!("{prefix}/mlp2/weight"), channels, hidden),
            mlp2_b: zeros(format!("{prefix}/mlp2/bias"), &[channels]),
            spatial_k: conv_param(rng, format!("{prefix}/spatial/kernel"), 1, 2, SPATIAL_KERNEL),
            spatial_b: zeros(format!("{prefix}/spatial/bias"), &[1]),
        }
    }

    pub(crate) fn collect<'s>(&'s self, out: &mut Vec<&'s Parameter>) {
        out.extend([&self.mlp1_w, &self.mlp1_b, &self.mlp2_w, &self.mlp2_b, &self.spatial_k, &self.spatial_b]);
    }

    fn collect_mut<'s>(&'s mut self, out: &mut Vec<&'s mut Parameter>) {
        out.extend([
            &mut self.mlp1_w,
            &mut self.mlp1_b,
            &mut self.mlp2_w,
            &mut self.mlp2_b,
            &mut self.spatial_k,
            &mut self.spatial_b,
        ]);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gamma: Parameter,
    pub beta: Parameter,
}

impl NormParams {
    fn new(prefix: &str, channels: usize) -> Self {
        Self {
            gamma: Parameter::new(format!("{prefix}/gamma"), Tensor::ones(&[channels])),
            beta: zeros(format!("{prefix}/beta"), &[channels]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    pub conv1_k: Parameter,
    pub conv1_b: Parameter,
    pub norm1: Option<NormParams>,
    pub cbam1: CbamParams,
    pub conv2_k: Parameter,
    pub conv2_b: Parameter,
    pub norm2: Option<NormParams>,
    pub cbam2: CbamParams,
}

impl BranchParams {
    pub fn init(rng: &mut ChaCha8Rng, index: usize, cfg: &ModelConfig) -> Self {
        let p = format!("branch{index}");
        let r = cfg.cbam_reduction;
        let conv1_k = conv_param(rng, format!("{p}/conv1/kernel"), CONV1.0, 2, CONV1.1);
        let cbam1 = CbamParams::init(rng, &format!("{p}/cbam1"), CONV1.0, r);
        let conv2_k = conv_param(rng, format!("{p}/conv2/kernel"), CONV2.0, CONV1.0, CONV2.1);
        let cbam2 = CbamParams::init(rng, &format!("{p}/cbam2"), CONV2.0, r);
        Self {
            conv1_k,
            conv1_b: zeros(format!("{p}/conv1/bias"), &[CONV1.0]),
            norm1: cfg.channel_norm.then(|| NormParams::new(&format!("{p}/norm1"), CONV1.0)),
            cbam1,
            conv2_k,
            conv2_b: zeros(format!("{p}/conv2/bias"), &[CONV2.0]),
            norm2: cfg.channel_norm.then(|| NormParams::new(&format!("{p}/norm2"), CONV2.0)),
            cbam2,
        }
    }

    pub(crate) fn collect<'s>(&'s self, out: &mut Vec<&'s Parameter>) {
        out.extend([&self.conv1_k, &self.conv1_b]);
        if let Some(n) = &self.norm1 {
            out.extend([&n.gamma, &n.beta]);
        }
        self.cbam1.collect(out);
        out.extend([&self.conv2_k, &self.conv2_b]);
        if let Some(n) = &self.norm2 {
            out.extend([&n.gamma, &n.beta]);
        }
        self.cbam2.collect(out);
    }

    fn collect_mut<'s>(&'s mut self, out: &mut Vec<&'s mut Parameter>) {
        out.extend([&mut self.conv1_k, &mut self.conv1_b]);
        if let Some(n) = &mut self.norm1 {
            out.extend([&mut n.gamma, &mut n.beta]);
        }
        self.cbam1.collect_mut(out);
        out.extend([&mut self.conv2_k, &mut self.conv2_b]);
        if let Some(n) = &mut self.norm2 {
            out.extend([&mut n.gamma, &mut n.beta]);
        }
        self.cbam2.collect_mut(out);
    }
}

/// Fully connected stack `in → hidden… → 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `(weight, bias)` per layer, input side first.
    pub layers: Vec<(Parameter, Parameter)>,
}

impl HeadParams {
    pub fn init(rng: &mut ChaCha8Rng, input: usize, hidden: &[usize]) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input;
        for (i, &h) in hidden.iter().chain(std::iter::once(&2)).enumerate() {
            layers.push((
                dense_param(rng, format!("head/dense{i}/weight"), h, prev),
                zeros(format!("head/dense{i}/bias"), &[h]),
            ));
            prev = h;
        }
        Self { layers }
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].0.value.shape()[1]
    }

    /// Hidden layers use ReLU and, when `dropout` carries an rng, dropout.
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        x: Var,
        rate: f64,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        self.forward_with(tape, x, rate, dropout, &mut bind_params())
    }

    pub(crate) fn forward_with<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        x: Var,
        rate: f64,
        mut dropout: Option<&mut ChaCha8Rng>,
        bind: Binder<'a, '_>,
    ) -> Result<Var, ModelError> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let w = bind(tape, w);
            let b = bind(tape, b);
            h = tape.dense(h, w, b).layer("head")?;
            if i < last {
                h = tape.relu(h).layer("head")?;
                if let Some(rng) = dropout.as_deref_mut() {
                    h = tape.dropout(h, rate, rng).layer("dropout")?;
                }
            }
        }
        Ok(h)
    }
}

/// All network parameters together with the configuration they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepAvo {
    pub config: ModelConfig,
    pub branches: Vec<BranchParams>,
    pub head: HeadParams,
}

impl DeepAvo {
    /// Xavier-uniform weights, zero biases, unit norm scales. The parameter
    /// draw order is fixed, so equal seeds give identical networks.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (qw, qh) = config.quadrant_size();
        let feat = branch_feature_len(qw, qh)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let branches = (0..4).map(|i| BranchParams::init(&mut rng, i, &config)).collect();
        let head = HeadParams::init(&mut rng, 4 * feat, &config.head_hidden);
        Ok(Self { config, branches, head })
    }

    /// Per-branch feature length for the configured input size.
    pub fn branch_feature_len(&self) -> Result<usize, ModelError> {
        let (qw, qh) = self.config.quadrant_size();
        branch_feature_len(qw, qh)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        for b in &self.branches {
            b.collect(&mut out);
        }
        for (w, b) in &self.head.layers {
            out.extend([w, b]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for b in &mut self.branches {
            b.collect_mut(&mut out);
        }
        for (w, b) in &mut self.head.layers {
            out.extend([w, b]);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&mut self) {
        for p in self.params_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn check_inputs(&self, inputs: &[Tensor; 4]) -> Result<(), ModelError> {
        let (qw, qh) = self.config.quadrant_size();
        for t in inputs {
            if t.shape() != [2, qh, qw] {
                let s = t.shape();
                return Err(ModelError::InputSize {
                    got_w: s.get(2).copied().unwrap_or(0),
                    got_h: s.get(1).copied().unwrap_or(0),
                    want_w: qw,
                    want_h: qh,
                });
            }
        }
        Ok(())
    }

    /// Records the four branches (`X^i`) on `tape` and returns their
    /// concatenation.
    pub fn features_on_tape<'a>(&'a self, tape: &mut Tape<'a>, inputs: &[Tensor; 4]) -> Result<Var, ModelError> {
        self.check_inputs(inputs)?;
        let mut feats = Vec::with_capacity(4);
        for (t, b) in inputs.iter().zip(&self.branches) {
            let x = tape.constant(t.clone());
            feats.push(branch_forward(tape, x, b, self.config.activation)?);
        }
        let cat = tape.concat(&feats, 0).layer("concat")?;
        let got = tape.value(cat).len();
        if got != self.head.input_len() {
            return Err(ModelError::FeatureMismatch { expected: self.head.input_len(), got });
        }
        Ok(cat)
    }

    /// Full forward pass to a length-2 output `(dp, dphi)`. Passing an rng
    /// enables dropout (training mode).
    pub fn forward_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        inputs: &[Tensor; 4],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        let x = self.features_on_tape(tape, inputs)?;
        self.head.forward(tape, x, self.config.dropout, dropout)
    }

    /// Per-branch features `X^i` for a quadrant set.
    pub fn branch_features(&self, qs: &QuadrantSet) -> Result<Vec<Tensor>, ModelError> {
        let inputs = qs.to_tensors(self.config.flow_scale);
        self.check_inputs(&inputs)?;
        let mut tape = Tape::new();
        let mut out = Vec::with_capacity(4);
        for (t, b) in inputs.iter().zip(&self.branches) {
            let x = tape.constant(t.clone());
            let v = branch_forward(&mut tape, x, b, self.config.activation)?;
            out.push(tape.value(v).clone());
        }
        Ok(out)
    }

    /// Evaluation-mode prediction from prepared quadrant tensors.
    pub fn predict_tensors(&self, inputs: &[Tensor; 4]) -> Result<PosePrediction, ModelError> {
        let mut tape = Tape::new();
        let y = self.forward_on_tape(&mut tape, inputs, None)?;
        let d = tape.value(y).data();
        Ok(PosePrediction { dp: d[0], dphi: d[1] })
    }

    /// Evaluation-mode prediction for one flow field's quadrants.
    pub fn predict(&self, qs: &QuadrantSet) -> Result<PosePrediction, ModelError> {
        self.predict_tensors(&qs.to_tensors(self.config.flow_scale))
    }

    /// Draws a fresh network and keeps only shapes; used by loaders that
    /// overwrite every value afterwards.
    pub fn skeleton(config: ModelConfig) -> Result<Self, ModelError> {
        let mut m = Self::new(config, 0)?;
        m.zero_all();
        Ok(m)
    }
}

