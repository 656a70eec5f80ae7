//! `key = value` run configuration.
//!
//! ```text
//! # desk-scale training
//! seed = 7
//! train.alpha = 100
//! model.head_hidden = 256, 64
//! ```
//!
//! Unknown keys are errors. Command-line `--set key=value` pairs are applied
//! after the file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use deepavo::dataset::{SceneSpec, SynthRanges};
use deepavo::eval::{Aggregation, AlignMode, EvalConfig};
use deepavo::flow::LkParams;
use deepavo::model::{Activation, ModelConfig};
use deepavo::train::TrainConfig;
use deepavo::Exec;

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    UnknownKey { key: String, line: Option<usize> },
    BadValue { key: String, value: String, reason: String },
    Syntax { line: usize, text: String },
    Invalid(String),
    Io { path: PathBuf, reason: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::UnknownKey { key, line: Some(l) } => write!(f, "unknown config key `{key}` (line {l})"),
            ConfigError::UnknownKey { key, line: None } => write!(f, "unknown config key `{key}`"),
            ConfigError::BadValue { key, value, reason } => write!(f, "bad value {value:?} for `{key}`: {reason}"),
            ConfigError::Syntax { line, text } => write!(f, "line {line}: expected `key = value`, got {text:?}"),
            ConfigError::Invalid(m) => write!(f, "invalid configuration: {m}"),
            ConfigError::Io { path, reason } => write!(f, "cannot read config {}: {reason}", path.display()),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Synthetic scene and motion settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSettings {
    /// Number of frame pairs.
    pub n: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub cam_height: f64,
    pub pitch: f64,
    pub ranges: SynthRanges,
}

impl Default for SynthSettings {
    fn default() -> Self {
        let s = SceneSpec::default();
        Self {
            n: 64,
            width: s.width,
            height: s.height,
            focal: s.focal,
            cam_height: s.cam_height,
            pitch: s.pitch,
            ranges: SynthRanges::default(),
        }
    }
}

impl SynthSettings {
    pub fn scene(&self, seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            width: self.width,
            height: self.height,
            focal: self.focal,
            cam_height: self.cam_height,
            pitch: self.pitch,
            ..SceneSpec::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Seeds the synthetic scene, motion and network initialization.
    pub seed: u64,
    pub parallel: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub lk: LkParams,
    pub eval: EvalConfig,
    pub align: AlignMode,
    pub synth: SynthSettings,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            parallel: true,
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            lk: LkParams::default(),
            eval: EvalConfig::default(),
            align: AlignMode::None,
            synth: SynthSettings::default(),
            data: None,
            out: None,
        }
    }
}

/// Every accepted key, in documentation order.
pub const KEYS: &[&str] = &[
    "seed",
    "parallel",
    "data",
    "out",
    "model.cbam_reduction",
    "model.activation",
    "model.dropout",
    "model.flow_scale",
    "model.input_width",
    "model.input_height",
    "model.head_hidden",
    "model.channel_norm",
    "train.alpha",
    "train.lr0",
    "train.halving_period",
    "train.beta1",
    "train.beta2",
    "train.epsilon",
    "train.batch_size",
    "train.max_epochs",
    "train.patience",
    "train.dropout",
    "train.seed",
    "train.val_fraction",
    "train.max_steps",
    "flow.window",
    "flow.levels",
    "flow.iters",
    "flow.min_eigen",
    "eval.lengths",
    "eval.step",
    "eval.frame_period",
    "eval.aggregation",
    "eval.align",
    "synth.n",
    "synth.width",
    "synth.height",
    "synth.focal",
    "synth.cam_height",
    "synth.pitch",
    "synth.dp_min",
    "synth.dp_max",
    "synth.dphi_min",
    "synth.dphi_max",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

impl RunConfig {
    pub fn exec(&self) -> Exec {
        if self.parallel {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    pub fn lk_params(&self) -> LkParams {
        LkParams { exec: self.exec(), ..self.lk }
    }

    /// Sets one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let bad = |reason: &str| ConfigError::BadValue {
            key: key.into(),
            value: v.into(),
            reason: reason.into(),
        };
        match key {
            "seed" => self.seed = parse(key, v)?,
            "parallel" => self.parallel = parse(key, v)?,
            "data" => self.data = Some(PathBuf::from(v)),
            "out" => self.out = Some(PathBuf::from(v)),
            "model.cbam_reduction" => self.model.cbam_reduction = parse(key, v)?,
            "model.activation" => {
                self.model.activation = match v {
                    "relu" => Activation::Relu,
                    "identity" => Activation::Identity,
                    _ => return Err(bad("expected relu or identity")),
                }
            }
            "model.dropout" => self.model.dropout = parse(key, v)?,
            "model.flow_scale" => self.model.flow_scale = parse(key, v)?,
            "model.input_width" => self.model.input_width = parse(key, v)?,
            "model.input_height" => self.model.input_height = parse(key, v)?,
            "model.head_hidden" => self.model.head_hidden = parse_list(key, v)?,
            "model.channel_norm" => self.model.channel_norm = parse(key, v)?,
            "train.alpha" => self.train.alpha = parse(key, v)?,
            "train.lr0" => self.train.lr0 = parse(key, v)?,
            "train.halving_period" => self.train.halving_period = parse(key, v)?,
            "train.beta1" => self.train.beta1 = parse(key, v)?,
            "train.beta2" => self.train.beta2 = parse(key, v)?,
            "train.epsilon" => self.train.epsilon = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.max_epochs" => self.train.max_epochs = parse(key, v)?,
            "train.patience" => self.train.patience = parse(key, v)?,
            "train.dropout" => self.train.dropout = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.val_fraction" => self.train.val_fraction = parse(key, v)?,
            "train.max_steps" => {
                self.train.max_steps = match v {
                    "none" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "flow.window" => self.lk.window = parse(key, v)?,
            "flow.levels" => self.lk.levels = parse(key, v)?,
            "flow.iters" => self.lk.iters_per_level = parse(key, v)?,
            "flow.min_eigen" => self.lk.min_eigen = parse(key, v)?,
            "eval.lengths" => self.eval.lengths = parse_list(key, v)?,
            "eval.step" => self.eval.step = parse(key, v)?,
            "eval.frame_period" => self.eval.frame_period = parse(key, v)?,
            "eval.aggregation" => {
                self.eval.aggregation = match v {
                    "mean" => Aggregation::Mean,
                    "rmse" => Aggregation::Rmse,
                    _ => return Err(bad("expected mean or rmse")),
                }
            }
            "eval.align" => self.align = v.parse().map_err(|_| bad("expected none, rigid or similarity"))?,
            "synth.n" => self.synth.n = parse(key, v)?,
            "synth.width" => self.synth.width = parse(key, v)?,
            "synth.height" => self.synth.height = parse(key, v)?,
            "synth.focal" => self.synth.focal = parse(key, v)?,
            "synth.cam_height" => self.synth.cam_height = parse(key, v)?,
            "synth.pitch" => self.synth.pitch = parse(key, v)?,
            "synth.dp_min" => self.synth.ranges.dp.0 = parse(key, v)?,
            "synth.dp_max" => self.synth.ranges.dp.1 = parse(key, v)?,
            "synth.dphi_min" => self.synth.ranges.dphi.0 = parse(key, v)?,
            "synth.dphi_max" => self.synth.ranges.dphi.1 = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey { key: key.into(), line: None }),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.trim().to_string(),
            })?;
            self.set(k.trim(), v).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { key, line: Some(i + 1) },
                other => other,
            })?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (k, v) = pair.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: pair.to_string(),
        })?;
        self.set(k.trim(), v)
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Defaults, then the file (if any), then overrides; validated.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Io {
                path: p.to_path_buf(),
                reason: e.to_string(),
            })?;
            c.apply_text(&text)?;
        }
        for o in overrides {
            c.apply_override(o)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn fmt::Display| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(|e| inv(&e))?;
        self.train.validate().map_err(|e| inv(&e))?;
        self.eval.validate().map_err(|e| inv(&e))?;
        self.synth.ranges.validate().map_err(|e| inv(&e))?;
        self.synth.scene(self.seed).validate().map_err(|e| inv(&e))?;
        if self.lk.window.is_multiple_of(2) || self.lk.levels == 0 || self.lk.iters_per_level == 0 {
            return Err(ConfigError::Invalid("flow.window must be odd; flow.levels and flow.iters at least 1".into()));
        }
        Ok(())
    }
}
