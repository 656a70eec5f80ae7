use rand::Rng;

use super::ops::{self, ConvGeom, PoolGeom};
use super::{invalid, shape_err, NumError, Parameter, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Average,
    Max,
}

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Conv2d { x: Var, k: Var, b: Var, geom: ConvGeom },
    AvgPool { x: Var, geom: PoolGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    Dense { x: Var, w: Var, b: Var },
    Sigmoid(Var),
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    /// C×H×W → C, one statistic per channel.
    GlobalPool { x: Var, kind: PoolKind, argmax: Vec<usize> },
    /// C×H×W → 1×H×W, one statistic per position across channels.
    ChannelPool { x: Var, kind: PoolKind, argmax: Vec<usize> },
    Sum(Var),
    ChannelNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool { .. } => "avg_pool2d",
            Op::MaxPool { .. } => "max_pool2d",
            Op::Dense { .. } => "dense",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "multiply",
            Op::Scale(..) => "scale",
            Op::Concat { .. } => "concat",
            Op::Reshape(_) => "reshape",
            Op::GlobalPool { .. } => "global_pool",
            Op::ChannelPool { .. } => "channel_pool",
            Op::Sum(_) => "sum",
            Op::ChannelNorm { .. } => "channel_norm",
        }
    }
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    needs_grad: bool,
    param: Option<String>,
}

/// Record of executed operations. Parameters may be borrowed for the tape's
/// lifetime, so binding large weight matrices costs no copy.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of the parameter bound under `name`, if it was reached.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// `(name, gradient)` for every bound parameter, in binding order.
    pub fn params(&self) -> impl Iterator<Item = (&str, Option<&Tensor>)> {
        self.params.iter().map(|(n, v)| (n.as_str(), self.wrt(*v)))
    }
}

/// Maps flat indices of `out_shape` onto a broadcast operand of shape `b_shape`
/// (same rank after left-padding with ones).
fn broadcast_index(out_shape: &[usize], b_shape: &[usize]) -> Option<Vec<usize>> {
    if b_shape.len() > out_shape.len() {
        return None;
    }
    let pad = out_shape.len() - b_shape.len();
    let b_full: Vec<usize> = std::iter::repeat_n(1, pad).chain(b_shape.iter().copied()).collect();
    if b_full
        .iter()
        .zip(out_shape)
        .any(|(&b, &o)| b != o && b != 1)
    {
        return None;
    }
    if b_full == out_shape {
        return Some((0..out_shape.iter().product()).collect());
    }
    let rank = out_shape.len();
    let mut b_strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..rank).rev() {
        b_strides[i] = if b_full[i] == 1 { 0 } else { s };
        s *= b_full[i];
    }
    let n: usize = out_shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut map = Vec::with_capacity(n);
    for _ in 0..n {
        map.push(idx.iter().zip(&b_strides).map(|(i, s)| i * s).sum());
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Some(map)
}

fn dims3(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize), NumError> {
    match t.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(shape_err(op, format!("expected C×H×W input, got {s:?}"))),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var, NumError> {
        if !value.all_finite() {
            return Err(NumError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a tensor; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant (never differentiated).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Binds a parameter by reference; its gradient is reported under `p.name`.
    pub fn param(&mut self, p: &'a Parameter) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(&p.value),
            op: Op::Leaf,
            needs_grad: true,
            param: Some(p.name.clone()),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, pad: usize) -> Result<Var, NumError> {
        let (c, h, w) = dims3("conv2d", self.value(x))?;
        let (o, kc, kh, kw) = match self.value(k).shape() {
            &[o, kc, kh, kw] => (o, kc, kh, kw),
            s => return Err(shape_err("conv2d", format!("kernels must be O×C×Kh×Kw, got {s:?}"))),
        };
        if kc != c {
            return Err(shape_err(
                "conv2d",
                format!("input has {c} channels but kernels expect {kc}"),
            ));
        }
        if self.value(b).shape() != [o] {
            return Err(shape_err(
                "conv2d",
                format!("bias shape {:?} does not match {o} output channels", self.value(b).shape()),
            ));
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        let (Some(oh), Some(ow)) = (
            ops::conv2d_output_size(h, kh, stride, pad),
            ops::conv2d_output_size(w, kw, stride, pad),
        ) else {
            return Err(shape_err(
                "conv2d",
                format!("{kh}×{kw} kernel does not fit {h}×{w} input padded by {pad}"),
            ));
        };
        let geom = ConvGeom { c, h, w, o, kh, kw, stride, pad, oh, ow };
        let out = ops::conv2d_forward(&geom, self.value(x).data(), self.value(k).data(), self.value(b).data());
        let ng = self.ng(x) || self.ng(k) || self.ng(b);
        self.push(Tensor::new(&[o, oh, ow], out)?, Op::Conv2d { x, k, b, geom }, ng)
    }

    pub fn pool2d(&mut self, x: Var, kind: PoolKind, k: usize, stride: usize, pad: usize) -> Result<Var, NumError> {
        if k == 0 || stride == 0 {
            return Err(invalid("pool2d", "window and stride must be positive"));
        }
        if pad >= k {
            return Err(invalid("pool2d", format!("padding {pad} must be smaller than window {k}")));
        }
        let (c, h, w) = dims3("pool2d", self.value(x))?;
        let (Some(oh), Some(ow)) = (
            ops::pool2d_output_size(h, k, stride, pad),
            ops::pool2d_output_size(w, k, stride, pad),
        ) else {
            return Err(shape_err(
                "pool2d",
                format!("{k}×{k} window does not fit {h}×{w} input padded by {pad}"),
            ));
        };
        let geom = PoolGeom { c, h, w, k, stride, pad, oh, ow };
        let ng = self.ng(x);
        match kind {
            PoolKind::Average => {
                let out = ops::avg_pool_forward(&geom, self.value(x).data());
                self.push(Tensor::new(&[c, oh, ow], out)?, Op::AvgPool { x, geom }, ng)
            }
            PoolKind::Max => {
                let (out, argmax) = ops::max_pool_forward(&geom, self.value(x).data());
                self.push(Tensor::new(&[c, oh, ow], out)?, Op::MaxPool { x, argmax }, ng)
            }
        }
    }

    /// `w · x + b` for `x` of length n, `w` of shape m×n.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumError> {
        let xv = self.value(x);
        let (m, n) = match self.value(w).shape() {
            &[m, n] => (m, n),
            s => return Err(shape_err("dense", format!("weights must be m×n, got {s:?}"))),
        };
        if xv.len() != n || xv.rank() != 1 {
            return Err(shape_err(
                "dense",
                format!("input of shape {:?} does not match weights {m}×{n}", xv.shape()),
            ));
        }
        if self.value(b).shape() != [m] {
            return Err(shape_err("dense", format!("bias must have length {m}")));
        }
        let xd = xv.data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let out: Vec<f64> = (0..m)
            .map(|i| {
                let row = &wd[i * n..(i + 1) * n];
                bd[i] + row.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(Tensor::vector(out), Op::Dense { x, w, b }, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumError> {
        let xv = self.value(x);
        let out: Vec<f64> = xv.data().iter().map(|&v| ops::sigmoid(v)).collect();
        let t = Tensor::new(xv.shape(), out)?;
        let ng = self.ng(x);
        self.push(t, Op::Sigmoid(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumError> {
        let xv = self.value(x);
        let out: Vec<f64> = xv.data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(xv.shape(), out)?;
        let ng = self.ng(x);
        self.push(t, Op::Relu(x), ng)
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool), NumError> {
        let av = self.value(a);
        let bv = self.value(b);
        let map = broadcast_index(av.shape(), bv.shape()).ok_or_else(|| {
            shape_err(
                op,
                format!("{:?} cannot broadcast onto {:?}", bv.shape(), av.shape()),
            )
        })?;
        let bd = bv.data();
        let out: Vec<f64> = av.data().iter().zip(&map).map(|(&x, &j)| f(x, bd[j])).collect();
        Ok((Tensor::new(av.shape(), out)?, self.ng(a) || self.ng(b)))
    }

    /// `a + b`, with `b` broadcast onto `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (t, ng) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (t, ng) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), ng)
    }

    /// Elementwise product, with `b` broadcast onto `a`'s shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (t, ng) = self.binary(a, b, "multiply", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, NumError> {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape(), xv.data().iter().map(|v| v * factor).collect())?;
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, factor), ng)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NumError> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", "nothing to concatenate"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for rank {}", base.len())));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} incompatible with {base:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let chunk = pv.shape()[axis] * inner;
                out.extend_from_slice(&pv.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(&shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumError> {
        let t = self.value(x).clone().with_requires_grad(false).reshape(shape)?;
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var, NumError> {
        let n = self.value(x).len();
        self.reshape(x, &[n])
    }

    /// Per-channel mean or max over all spatial positions: C×H×W → C.
    pub fn global_pool(&mut self, x: Var, kind: PoolKind) -> Result<Var, NumError> {
        let (c, h, w) = dims3("global_pool", self.value(x))?;
        let plane = h * w;
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(c);
        let mut argmax = Vec::new();
        for ch in 0..c {
            let s = &d[ch * plane..(ch + 1) * plane];
            match kind {
                PoolKind::Average => out.push(s.iter().sum::<f64>() / plane as f64),
                PoolKind::Max => {
                    let (i, &m) = first_max(s);
                    out.push(m);
                    argmax.push(ch * plane + i);
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::vector(out), Op::GlobalPool { x, kind, argmax }, ng)
    }

    /// Mean or max across channels at each position: C×H×W → 1×H×W.
    pub fn channel_pool(&mut self, x: Var, kind: PoolKind) -> Result<Var, NumError> {
        let (c, h, w) = dims3("channel_pool", self.value(x))?;
        let plane = h * w;
        let d = self.value(x).data();
        let mut out = vec![0.0; plane];
        let mut argmax = Vec::new();
        match kind {
            PoolKind::Average => {
                for ch in 0..c {
                    for (o, v) in out.iter_mut().zip(&d[ch * plane..(ch + 1) * plane]) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|o| *o /= c as f64);
            }
            PoolKind::Max => {
                argmax = vec![0; plane];
                out.copy_from_slice(&d[..plane]);
                argmax.iter_mut().enumerate().for_each(|(p, a)| *a = p);
                for ch in 1..c {
                    for p in 0..plane {
                        let v = d[ch * plane + p];
                        if v > out[p] {
                            out[p] = v;
                            argmax[p] = ch * plane + p;
                        }
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[1, h, w], out)?, Op::ChannelPool { x, kind, argmax }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumError> {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Per-channel normalization over spatial positions followed by a learned
    /// affine map: `gamma_c * (x - mean_c) / sqrt(var_c + eps) + beta_c`.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NumError> {
        let (c, h, w) = dims3("channel_norm", self.value(x))?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err("channel_norm", format!("gamma/beta must have length {c}")));
        }
        let plane = (h * w) as f64;
        let d = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; d.len()];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; d.len()];
        for ch in 0..c {
            let r = ch * h * w..(ch + 1) * h * w;
            let s = &d[r.clone()];
            let mean = s.iter().sum::<f64>() / plane;
            let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[ch] = is;
            for i in r {
                xhat[i] = (d[i] - mean) * is;
                out[i] = g[ch] * xhat[i] + b[ch];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(Tensor::new(&[c, h, w], out)?, Op::ChannelNorm { x, gamma, beta, xhat, inv_std }, ng)
    }

    /// Inverted dropout: zeroes each element with probability `rate` and scales
    /// survivors by `1 / (1 - rate)`.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var, NumError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.value(x).shape().to_vec();
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let m = self.constant(Tensor::new(&shape, mask)?);
        self.mul(x, m)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.vjp(node, &g);
            grads[i] = Some(g);
            for (v, d) in contributions {
                if !d.iter().all(|x| x.is_finite()) {
                    return Err(NumError::NonFinite { op: node.op.name() });
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(d),
                }
            }
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.filter(|_| n.needs_grad).map(|g| Tensor::new(n.value.get().shape(), g).expect("shape")))
            .collect();
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.clone().map(|name| (name, Var(i))))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn reduce_broadcast(&self, target: Var, out_shape: &[usize], g: impl Iterator<Item = f64>) -> Vec<f64> {
        let ts = self.value(target).shape();
        let map = broadcast_index(out_shape, ts).expect("checked in forward");
        let mut acc = vec![0.0; self.value(target).len()];
        for (j, gv) in map.into_iter().zip(g) {
            acc[j] += gv;
        }
        acc
    }

    /// Vector-Jacobian products of one node, for inputs that need gradients.
    fn vjp(&self, node: &Node<'a>, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let mut out = Vec::new();
        let out_val = node.value.get();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, b, geom } => {
                let need = [self.ng(*x), self.ng(*k), self.ng(*b)];
                let (dx, dk, db) = ops::conv2d_backward(geom, self.value(*x).data(), self.value(*k).data(), g, need);
                for (v, d) in [(*x, dx), (*k, dk), (*b, db)] {
                    if let Some(d) = d {
                        out.push((v, d));
                    }
                }
            }
            Op::AvgPool { x, geom } => out.push((*x, ops::avg_pool_backward(geom, g))),
            Op::MaxPool { x, argmax } | Op::GlobalPool { x, kind: PoolKind::Max, argmax } | Op::ChannelPool { x, kind: PoolKind::Max, argmax } => {
                let mut d = vec![0.0; self.value(*x).len()];
                for (&a, &gv) in argmax.iter().zip(g) {
                    d[a] += gv;
                }
                out.push((*x, d));
            }
            Op::GlobalPool { x, kind: PoolKind::Average, .. } => {
                let n = self.value(*x).len();
                let plane = n / g.len();
                let d = (0..n).map(|i| g[i / plane] / plane as f64).collect();
                out.push((*x, d));
            }
            Op::ChannelPool { x, kind: PoolKind::Average, .. } => {
                let n = self.value(*x).len();
                let plane = g.len();
                let c = (n / plane) as f64;
                let d = (0..n).map(|i| g[i % plane] / c).collect();
                out.push((*x, d));
            }
            Op::Dense { x, w, b } => {
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let n = xd.len();
                if self.ng(*x) {
                    let mut dx = vec![0.0; n];
                    for (i, &gi) in g.iter().enumerate() {
                        if gi != 0.0 {
                            for (d, wv) in dx.iter_mut().zip(&wd[i * n..(i + 1) * n]) {
                                *d += gi * wv;
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; wd.len()];
                    for (i, &gi) in g.iter().enumerate() {
                        if gi != 0.0 {
                            for (d, xv) in dw[i * n..(i + 1) * n].iter_mut().zip(xd) {
                                *d = gi * xv;
                            }
                        }
                    }
                    out.push((*w, dw));
                }
                if self.ng(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Sigmoid(x) => {
                let d = out_val.data().iter().zip(g).map(|(s, gv)| gv * s * (1.0 - s)).collect();
                out.push((*x, d));
            }
            Op::Relu(x) => {
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                out.push((*x, d));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.ng(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.ng(*b) {
                    out.push((*b, self.reduce_broadcast(*b, out_val.shape(), g.iter().map(|v| sign * v))));
                }
            }
            Op::Mul(a, b) => {
                let shape = out_val.shape();
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if self.ng(*a) {
                    let map = broadcast_index(shape, self.value(*b).shape()).expect("checked in forward");
                    out.push((*a, g.iter().zip(map).map(|(gv, j)| gv * bd[j]).collect()));
                }
                if self.ng(*b) {
                    out.push((*b, self.reduce_broadcast(*b, shape, g.iter().zip(ad).map(|(gv, av)| gv * av))));
                }
            }
            Op::Scale(x, f) => out.push((*x, g.iter().map(|v| v * f).collect())),
            Op::Concat { parts, axis } => {
                let shape = out_val.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.value(p).shape()[*axis] * inner;
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                        }
                        out.push((p, d));
                    }
                    offset += chunk;
                }
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Sum(x) => out.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::ChannelNorm { x, gamma, beta, xhat, inv_std } => {
                let c = inv_std.len();
                let plane = xhat.len() / c;
                let gam = self.value(*gamma).data();
                let mut dx = vec![0.0; xhat.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    let r = ch * plane..(ch + 1) * plane;
                    let (mut s_dxh, mut s_dxh_xh) = (0.0, 0.0);
                    for i in r.clone() {
                        dgamma[ch] += g[i] * xhat[i];
                        dbeta[ch] += g[i];
                        let dxh = g[i] * gam[ch];
                        s_dxh += dxh;
                        s_dxh_xh += dxh * xhat[i];
                    }
                    let n = plane as f64;
                    for i in r {
                        let dxh = g[i] * gam[ch];
                        dx[i] = inv_std[ch] / n * (n * dxh - s_dxh - xhat[i] * s_dxh_xh);
                    }
                }
                if self.ng(*x) {
                    out.push((*x, dx));
                }
                if self.ng(*gamma) {
                    out.push((*gamma, dgamma));
                }
                if self.ng(*beta) {
                    out.push((*beta, dbeta));
                }
            }
        }
        out.retain(|(v, _)| self.ng(*v));
        out
    }
}

fn first_max(s: &[f64]) -> (usize, &f64) {
    let mut best = 0;
    for (i, v) in s.iter().enumerate().skip(1) {
        if *v > s[best] {
            best = i;
        }
    }
    (best, &s[best])
}
