//! Planar pose bookkeeping in KITTI odometry conventions.
//!
//! Ground-truth 3×4 poses are reduced to per-frame increments `(dp, dphi)`,
//! and predicted increments are integrated back into 3×4 poses in the X–Z
//! plane (elevation is dropped).

mod kitti;
mod umeyama;

pub use kitti::{format_kitti_poses, parse_kitti_poses, read_kitti_poses, write_kitti_poses};
pub use umeyama::{umeyama_align, Alignment};

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("rotation is not orthonormal (|RᵀR - I| = {orth:.3e}, det = {det})")]
    NotRotation { orth: f64, det: f64 },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("sequence lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate point set: {0}")]
    Degenerate(&'static str),
    #[error("invalid increment: {0}")]
    InvalidIncrement(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const ROTATION_TOL: f64 = 1e-6;

/// Rigid transform `[R | T]` mapping camera coordinates of a frame into the
/// coordinates of the sequence origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseMatrix {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl PoseMatrix {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// From 12 row-major values `r11 r12 r13 tx r21 ... tz`. No validation.
    pub fn from_row_major(v: &[f64; 12]) -> Self {
        Self {
            rotation: Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]),
            translation: Vector3::new(v[3], v[7], v[11]),
        }
    }

    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
        ]
    }

    /// Yaw-only pose in the X–Z plane:
    /// `[[cos φ, 0, -sin φ, tx], [0, 1, 0, 0], [sin φ, 0, cos φ, tz]]`.
    pub fn planar(phi: f64, tx: f64, tz: f64) -> Self {
        let (s, c) = phi.sin_cos();
        Self {
            rotation: Matrix3::new(c, 0.0, -s, 0.0, 1.0, 0.0, s, 0.0, c),
            translation: Vector3::new(tx, 0.0, tz),
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let orth = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        let det = self.rotation.determinant();
        if !(orth <= ROTATION_TOL && (det - 1.0).abs() <= ROTATION_TOL) {
            return Err(GeometryError::NotRotation { orth, det });
        }
        Ok(())
    }

    /// Rigid inverse `[Rᵀ | -Rᵀ T]`.
    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &PoseMatrix) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Heading read from the first row of R: `atan2(-r13, r11)`.
    pub fn heading(&self) -> f64 {
        (-self.rotation[(0, 2)]).atan2(self.rotation[(0, 0)])
    }

    /// Rotation angle of R in radians, in `[0, π]`.
    ///
    /// Equals `acos((trace(R) - 1) / 2)`, evaluated as `atan2(sin, cos)` with
    /// the sine taken from the skew part so that near-identity rotations do
    /// not lose half their digits.
    pub fn rotation_angle(&self) -> f64 {
        let r = &self.rotation;
        let cos = 0.5 * (r.trace() - 1.0);
        let sin = 0.5
            * Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm();
        sin.atan2(cos)
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(x: f64) -> f64 {
    let w = x.sin().atan2(x.cos());
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Frame-to-frame motion: travelled distance (m) and heading change (rad).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseIncrement {
    pub dp: f64,
    pub dphi: f64,
}

impl PoseIncrement {
    pub fn new(dp: f64, dphi: f64) -> Result<Self, GeometryError> {
        if !(dp.is_finite() && dp >= 0.0) {
            return Err(GeometryError::InvalidIncrement(format!("dp = {dp} must be finite and non-negative")));
        }
        if !dphi.is_finite() {
            return Err(GeometryError::InvalidIncrement(format!("dphi = {dphi} is not finite")));
        }
        Ok(Self {
            dp,
            dphi: wrap_angle(dphi),
        })
    }
}

/// Accumulated planar state.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrajPoint {
    pub phi: f64,
    pub tx: f64,
    pub tz: f64,
}

pub type Trajectory2D = Vec<TrajPoint>;

/// Increment between two consecutive ground-truth poses: heading difference
/// (wrapped) and the full 3-D distance between the translations.
pub fn decompose(prev: &PoseMatrix, curr: &PoseMatrix) -> Result<PoseIncrement, GeometryError> {
    prev.validate()?;
    curr.validate()?;
    Ok(PoseIncrement {
        dp: (curr.translation - prev.translation).norm(),
        dphi: wrap_angle(curr.heading() - prev.heading()),
    })
}

/// Increments for a whole pose sequence (one fewer than poses).
pub fn decompose_sequence(poses: &[PoseMatrix]) -> Result<Vec<PoseIncrement>, GeometryError> {
    poses.windows(2).map(|w| decompose(&w[0], &w[1])).collect()
}

/// Integrates increments from the origin. Both outputs hold `n + 1` entries,
/// the first being the origin.
pub fn accumulate(increments: &[PoseIncrement]) -> (Trajectory2D, Vec<PoseMatrix>) {
    let mut state = TrajPoint::default();
    let mut traj = Vec::with_capacity(increments.len() + 1);
    let mut poses = Vec::with_capacity(increments.len() + 1);
    traj.push(state);
    poses.push(PoseMatrix::planar(0.0, 0.0, 0.0));
    for inc in increments {
        state.phi += inc.dphi;
        let (s, c) = state.phi.sin_cos();
        state.tx += inc.dp * c;
        state.tz += inc.dp * s;
        traj.push(state);
        poses.push(PoseMatrix::planar(state.phi, state.tx, state.tz));
    }
    (traj, poses)
}
