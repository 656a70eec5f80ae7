//! Binary checkpoint: 8-byte magic `DAVOCKPT`, `u32` version, a `u32`-length
//! JSON metadata block (model config, epoch, history summary, optimizer step),
//! `u32` entry count, then entries of `u32` name length, UTF-8 name, `u32`
//! rank, `rank × u64` dims and little-endian `f64` values. Adam moments are
//! stored as entries named `adam.m/<param>` and `adam.v/<param>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{DeepAvo, ModelConfig};
use crate::numcore::Tensor;

use super::{AdamState, TrainError};

pub const CKPT_MAGIC: &[u8; 8] = b"DAVOCKPT";
pub const CKPT_VERSION: u32 = 1;

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HistorySummary {
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub steps: usize,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Named parameter values in model order.
    pub params: Vec<(String, Tensor)>,
    pub adam: Option<AdamState>,
    pub epoch: usize,
    pub summary: HistorySummary,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    epoch: usize,
    summary: HistorySummary,
    adam_step: Option<u64>,
}

impl Checkpoint {
    pub fn from_model(model: &DeepAvo, adam: Option<&AdamState>, epoch: usize, summary: HistorySummary) -> Self {
        Self {
            config: model.config.clone(),
            params: model
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.clone().with_requires_grad(false)))
                .collect(),
            adam: adam.cloned(),
            epoch,
            summary,
        }
    }

    /// Rebuilds the network; every parameter must be present with its shape.
    pub fn to_model(&self) -> Result<DeepAvo, TrainError> {
        let mut model = DeepAvo::skeleton(self.config.clone())?;
        if model.params().len() != self.params.len() {
            return Err(TrainError::Checkpoint(format!(
                "holds {} parameters, the configured model has {}",
                self.params.len(),
                model.params().len()
            )));
        }
        for p in model.params_mut() {
            let (_, t) = self
                .params
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| TrainError::Checkpoint(format!("parameter {} missing", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(TrainError::Checkpoint(format!(
                    "parameter {} has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value.data_mut().copy_from_slice(t.data());
        }
        Ok(model)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_entry(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(c: &Checkpoint) -> Result<Vec<u8>, TrainError> {
    let meta = Meta {
        config: c.config.clone(),
        epoch: c.epoch,
        summary: c.summary.clone(),
        adam_step: c.adam.as_ref().map(|a| a.step),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| TrainError::Checkpoint(format!("metadata: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    put_u32(&mut out, CKPT_VERSION);
    put_u32(&mut out, json.len() as u32);
    out.extend_from_slice(&json);
    let adam_entries = c.adam.as_ref().map_or(0, |a| 2 * a.m.len());
    put_u32(&mut out, (c.params.len() + adam_entries) as u32);
    for (n, t) in &c.params {
        put_entry(&mut out, n, t);
    }
    if let Some(a) = &c.adam {
        for (n, m) in a.names.iter().zip(&a.m) {
            put_entry(&mut out, &format!("{ADAM_M}{n}"), m);
        }
        for (n, v) in a.names.iter().zip(&a.v) {
            put_entry(&mut out, &format!("{ADAM_V}{n}"), v);
        }
    }
    Ok(out)
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8], TrainError> {
        if self.buf.len() - self.pos < n {
            return Err(TrainError::Checkpoint(format!(
                "truncated at byte {} reading {what} ({n} bytes needed, {} left)",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, TrainError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(TrainError::Checkpoint(format!("bad magic {:?}", String::from_utf8_lossy(magic))));
    }
    let version = r.u32("version")?;
    if version != CKPT_VERSION {
        return Err(TrainError::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta: Meta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| TrainError::Checkpoint(format!("metadata: {e}")))?;
    let count = r.u32("entry count")?;
    let mut params = Vec::new();
    let mut ms = Vec::new();
    let mut vs = Vec::new();
    for _ in 0..count {
        let nlen = r.u32("entry name length")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "entry name")?)
            .map_err(|_| TrainError::Checkpoint("entry name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| TrainError::Checkpoint(format!("entry {name}: shape {shape:?} overflows")))?;
        let raw = r.take(n * 8, &format!("values of {name}"))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(&shape, data).map_err(|e| TrainError::Checkpoint(format!("entry {name}: {e}")))?;
        if let Some(p) = name.strip_prefix(ADAM_M) {
            ms.push((p.to_string(), t));
        } else if let Some(p) = name.strip_prefix(ADAM_V) {
            vs.push((p.to_string(), t));
        } else {
            params.push((name, t));
        }
    }
    if r.pos != bytes.len() {
        return Err(TrainError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let adam = match meta.adam_step {
        None => None,
        Some(step) => {
            if ms.len() != vs.len() || ms.iter().zip(&vs).any(|(a, b)| a.0 != b.0) {
                return Err(TrainError::Checkpoint("first and second moment entries do not pair up".into()));
            }
            Some(AdamState {
                step,
                names: ms.iter().map(|(n, _)| n.clone()).collect(),
                m: ms.into_iter().map(|(_, t)| t).collect(),
                v: vs.into_iter().map(|(_, t)| t).collect(),
            })
        }
    };
    Ok(Checkpoint {
        config: meta.config,
        params,
        adam,
        epoch: meta.epoch,
        summary: meta.summary,
    })
}

pub fn save_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<(), TrainError> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(c)?;
    std::fs::write(path, bytes).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, TrainError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })?;
    decode_checkpoint(&bytes)
}
