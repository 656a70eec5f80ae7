//! KITTI-style odometry drift: relative pose errors over fixed path lengths,
//! aggregated per length, per speed bin and overall.

mod report;

pub use report::{Aggregation, Bucket, EvalReport};

use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{umeyama_align, GeometryError, PoseMatrix};
use crate::Exec;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("trajectory lengths differ: gt {0}, est {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 poses, got {0}")]
    TooShort(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("report serialization failed: {0}")]
    Serialize(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Segment lengths in meters.
    pub lengths: Vec<f64>,
    /// Stride between segment start frames.
    pub step: usize,
    /// Seconds between frames.
    pub frame_period: f64,
    /// Ascending speed-bin edges in m/s.
    pub speed_edges: Vec<f64>,
    pub aggregation: Aggregation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            lengths: (1..=8).map(|i| 100.0 * i as f64).collect(),
            step: 10,
            frame_period: 0.1,
            speed_edges: (0..=13).map(|i| 2.0 * i as f64).collect(),
            aggregation: Aggregation::Mean,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.lengths.is_empty() || self.lengths.iter().any(|l| !(*l > 0.0)) {
            return Err(EvalError::Config("segment lengths must be positive".into()));
        }
        if self.step == 0 {
            return Err(EvalError::Config("step must be at least 1".into()));
        }
        if !(self.frame_period > 0.0) {
            return Err(EvalError::Config("frame period must be positive".into()));
        }
        if self.speed_edges.len() < 2 || self.speed_edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(EvalError::Config("speed edges must be strictly ascending (at least 2)".into()));
        }
        Ok(())
    }
}

/// Relative error of one segment; `t_err` is a ratio, `r_err` is rad/m.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentError {
    pub first_frame: usize,
    pub length: f64,
    pub t_err: f64,
    pub r_err: f64,
    /// Average speed over the segment, m/s.
    pub speed: f64,
}

/// Cumulative path length along the ground-truth translations.
pub fn trajectory_distances(gt: &[PoseMatrix]) -> Vec<f64> {
    let mut out = Vec::with_capacity(gt.len());
    let mut d = 0.0;
    for (i, p) in gt.iter().enumerate() {
        if i > 0 {
            d += (p.translation - gt[i - 1].translation).norm();
        }
        out.push(d);
    }
    out
}

/// First index after `first` whose cumulative distance gain reaches `length`.
fn last_frame(dist: &[f64], first: usize, length: f64) -> Option<usize> {
    (first + 1..dist.len()).find(|&j| dist[j] >= dist[first] + length)
}

pub fn segment_errors(
    gt: &[PoseMatrix],
    est: &[PoseMatrix],
    cfg: &EvalConfig,
    exec: Exec,
) -> Result<Vec<SegmentError>, EvalError> {
    if gt.len() != est.len() {
        return Err(EvalError::LengthMismatch(gt.len(), est.len()));
    }
    if gt.len() < 2 {
        return Err(EvalError::TooShort(gt.len()));
    }
    cfg.validate()?;
    let dist = trajectory_distances(gt);
    let starts: Vec<usize> = (0..gt.len()).step_by(cfg.step).collect();
    let per_start = exec.map(starts.len(), |si| {
        let first = starts[si];
        cfg.lengths
            .iter()
            .filter_map(|&len| {
                let last = last_frame(&dist, first, len)?;
                let d_gt = gt[first].inverse().compose(&gt[last]);
                let d_est = est[first].inverse().compose(&est[last]);
                let err = d_gt.inverse().compose(&d_est);
                let frames = (last - first + 1) as f64;
                Some(SegmentError {
                    first_frame: first,
                    length: len,
                    t_err: err.translation.norm() / len,
                    r_err: err.rotation_angle() / len,
                    speed: len / (frames * cfg.frame_period),
                })
            })
            .collect::<Vec<_>>()
    });
    Ok(per_start.into_iter().flatten().collect())
}

/// Trajectory alignment applied to the estimate before scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    None,
    Rigid,
    Similarity,
}

impl std::str::FromStr for AlignMode {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(AlignMode::None),
            "rigid" => Ok(AlignMode::Rigid),
            "similarity" => Ok(AlignMode::Similarity),
            other => Err(EvalError::Config(format!("unknown alignment {other:?}"))),
        }
    }
}

/// Aligns `est` positions onto `gt` with Umeyama and maps every estimated pose
/// through the same transform (`R_i ← R·R_i`, `t_i ← s·R·t_i + t`).
pub fn align_trajectory(gt: &[PoseMatrix], est: &[PoseMatrix], mode: AlignMode) -> Result<Vec<PoseMatrix>, EvalError> {
    if gt.len() != est.len() {
        return Err(EvalError::LengthMismatch(gt.len(), est.len()));
    }
    if mode == AlignMode::None {
        return Ok(est.to_vec());
    }
    let e: Vec<Vector3<f64>> = est.iter().map(|p| p.translation).collect();
    let g: Vec<Vector3<f64>> = gt.iter().map(|p| p.translation).collect();
    let a = umeyama_align(&e, &g, mode == AlignMode::Similarity)?;
    Ok(est
        .iter()
        .zip(&a.aligned)
        .map(|(p, t)| PoseMatrix {
            rotation: a.rotation * p.rotation,
            translation: *t,
        })
        .collect())
}

pub(crate) fn rad_per_m_to_deg_per_100m(r: f64) -> f64 {
    r * (180.0 / PI) * 100.0
}
