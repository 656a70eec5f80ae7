use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::flow::{FlowField, GrayImage};
use crate::geometry::PoseIncrement;
use crate::texture::ValueNoise;
use crate::Exec;

use super::DatasetError;

/// Fraction of pixels allowed to leave the frame between two views.
const MAX_OUT_OF_FRAME: f64 = 0.3;
/// Sub-pixel samples per axis when rendering from the texture.
const SUPERSAMPLE: usize = 3;

/// Pinhole camera above a textured ground plane.
///
/// Camera axes are x right, y down, z forward; the camera is pitched down by
/// `pitch` about its x axis and the vehicle yaws about the vertical.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels.
    pub focal: f64,
    /// Camera height above the ground, metres.
    pub cam_height: f64,
    /// Downward tilt, radians.
    pub pitch: f64,
    pub octaves: u32,
    /// Coarsest texture cell, metres.
    pub cell: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 256,
            height: 96,
            focal: 200.0,
            cam_height: 1.5,
            pitch: 0.4,
            octaves: 3,
            cell: 0.5,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::InvalidParameter(m));
        if !(self.focal > 0.0) {
            return bad(format!("focal length {} must be positive", self.focal));
        }
        if !(self.cam_height > 0.0) {
            return bad(format!("camera height {} must be positive", self.cam_height));
        }
        if self.width < 2 || self.height < 2 {
            return bad("image must be at least 2×2".into());
        }
        if !(self.cell > 0.0) {
            return bad("texture cell must be positive".into());
        }
        // every pixel ray must hit the ground in front of the camera
        let top = self.ray(0.0, -0.5);
        if top.y <= 1e-3 {
            return bad(format!("pitch {} leaves the horizon inside the image", self.pitch));
        }
        Ok(())
    }

    fn texture(&self) -> ValueNoise {
        ValueNoise::new(self.seed, self.octaves, self.cell)
    }

    fn centre(&self) -> (f64, f64) {
        ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)
    }

    fn k(&self) -> Matrix3<f64> {
        let (cx, cy) = self.centre();
        Matrix3::new(self.focal, 0.0, cx, 0.0, self.focal, cy, 0.0, 0.0, 1.0)
    }

    /// Vehicle → camera rotation (pitch about x).
    fn pitch_rot(&self) -> Matrix3<f64> {
        let (s, c) = self.pitch.sin_cos();
        Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
    }

    /// Viewing ray of pixel `(u, v)` in vehicle coordinates.
    fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let (cx, cy) = self.centre();
        let d = Vector3::new((u - cx) / self.focal, (v - cy) / self.focal, 1.0);
        self.pitch_rot().transpose() * d
    }
}

/// Vehicle pose on the ground plane: position `(x, z)` in metres and heading
/// `psi`; forward is `(-sin psi, cos psi)`, matching the planar pose matrices.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CameraPose {
    pub x: f64,
    pub z: f64,
    pub psi: f64,
}

impl CameraPose {
    /// Drive `dp` metres along the current heading, then turn by `dphi`.
    pub fn step(&self, inc: &PoseIncrement) -> CameraPose {
        let (s, c) = self.psi.sin_cos();
        CameraPose {
            x: self.x - inc.dp * s,
            z: self.z + inc.dp * c,
            psi: self.psi + inc.dphi,
        }
    }

    fn world_point(&self, q: &Vector3<f64>) -> (f64, f64) {
        let (s, c) = self.psi.sin_cos();
        (self.x + c * q.x - s * q.z, self.z + s * q.x + c * q.z)
    }
}

/// Plane-induced homography mapping pixels of the previous view to the next.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    pub m: Matrix3<f64>,
}

impl Homography {
    /// For a ground point `q` seen by the previous vehicle frame, the next
    /// frame sees `R(dphi)^T (q - t)` with `t = (0, 0, dp)`; on the plane
    /// `n·q = h` that is linear in `q`.
    pub fn ground(spec: &SceneSpec, inc: &PoseIncrement) -> Homography {
        if inc.dp == 0.0 && inc.dphi == 0.0 {
            return Homography { m: Matrix3::identity() };
        }
        let (s, c) = inc.dphi.sin_cos();
        let yaw = Matrix3::new(c, 0.0, -s, 0.0, 1.0, 0.0, s, 0.0, c);
        let t = Vector3::new(0.0, 0.0, inc.dp);
        let n = Vector3::new(0.0, 1.0, 0.0);
        let plane = Matrix3::identity() - t * n.transpose() / spec.cam_height;
        let k = spec.k();
        let kinv = k.try_inverse().expect("focal > 0");
        let rp = spec.pitch_rot();
        Homography {
            m: k * rp * yaw.transpose() * plane * rp.transpose() * kinv,
        }
    }

    /// Maps `(x, y)`; `None` when the point lands behind the camera.
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let p = self.m * Vector3::new(x, y, 1.0);
        (p.z > 1e-12).then(|| (p.x / p.z, p.y / p.z))
    }

    pub fn inverse(&self) -> Homography {
        Homography {
            m: self.m.try_inverse().expect("plane homography is invertible"),
        }
    }
}

/// Analytic flow from the previous to the next view for a ground-plane scene.
pub fn ground_flow(spec: &SceneSpec, inc: &PoseIncrement) -> FlowField {
    let h = Homography::ground(spec, inc);
    FlowField::from_fn(spec.width, spec.height, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        match h.apply(xf, yf) {
            Some((nx, ny)) => (nx - xf, ny - yf),
            None => (f64::NAN, f64::NAN),
        }
    })
}

fn out_of_frame(spec: &SceneSpec, h: &Homography) -> f64 {
    let (w, hh) = ((spec.width - 1) as f64, (spec.height - 1) as f64);
    let mut out = 0usize;
    for y in 0..spec.height {
        for x in 0..spec.width {
            let inside = h
                .apply(x as f64, y as f64)
                .is_some_and(|(u, v)| (0.0..=w).contains(&u) && (0.0..=hh).contains(&v));
            out += usize::from(!inside);
        }
    }
    out as f64 / (spec.width * spec.height) as f64
}

/// Renders the ground texture as seen from `pose`, averaging a 3×3 grid of
/// sub-pixel rays per pixel.
pub fn render_view(spec: &SceneSpec, pose: &CameraPose, exec: Exec) -> Result<GrayImage, DatasetError> {
    spec.validate()?;
    let tex = spec.texture();
    let rows = exec.map(spec.height, |y| {
        (0..spec.width)
            .map(|x| {
                let mut acc = 0.0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let du = (sx as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
                        let dv = (sy as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
                        let d = spec.ray(x as f64 + du, y as f64 + dv);
                        let q = d * (spec.cam_height / d.y);
                        let (wx, wz) = pose.world_point(&q);
                        acc += tex.sample(wx, wz);
                    }
                }
                acc / (SUPERSAMPLE * SUPERSAMPLE) as f64
            })
            .collect::<Vec<f64>>()
    });
    Ok(GrayImage::new(spec.width, spec.height, rows.concat())?)
}

/// One training pair with its exact increment.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub prev: GrayImage,
    pub next: GrayImage,
    pub gt: PoseIncrement,
}

/// Renders the previous view at the origin and warps it by the ground-plane
/// homography of `inc` (bilinear, border clamp).
pub fn render_pair(spec: &SceneSpec, inc: &PoseIncrement) -> Result<Sample, DatasetError> {
    let inc = PoseIncrement::new(inc.dp, inc.dphi)?;
    let h = Homography::ground(spec, &inc);
    let fraction = out_of_frame(spec, &h);
    if fraction > MAX_OUT_OF_FRAME {
        return Err(DatasetError::TooMuchMotion { fraction });
    }
    let prev = render_view(spec, &CameraPose::default(), Exec::default())?;
    let inv = h.inverse();
    let next = GrayImage::from_fn(spec.width, spec.height, |x, y| match inv.apply(x as f64, y as f64) {
        Some((px, py)) => prev.sample(px, py),
        None => 0.0,
    });
    Ok(Sample { prev, next, gt: inc })
}

/// Renders `increments.len() + 1` views along the driven path, each straight
/// from the texture. Rejects any step that moves too much of the frame out.
pub fn render_sequence(
    spec: &SceneSpec,
    increments: &[PoseIncrement],
    exec: Exec,
) -> Result<Vec<GrayImage>, DatasetError> {
    spec.validate()?;
    let mut poses = vec![CameraPose::default()];
    for inc in increments {
        let fraction = out_of_frame(spec, &Homography::ground(spec, inc));
        if fraction > MAX_OUT_OF_FRAME {
            return Err(DatasetError::TooMuchMotion { fraction });
        }
        poses.push(poses.last().unwrap().step(inc));
    }
    poses.iter().map(|p| render_view(spec, p, exec)).collect()
}

/// Closed ranges for synthetic motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthRanges {
    pub dp: (f64, f64),
    pub dphi: (f64, f64),
}

impl Default for SynthRanges {
    fn default() -> Self {
        Self {
            dp: (0.05, 0.25),
            dphi: (-0.05, 0.05),
        }
    }
}

impl SynthRanges {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let (a, b) = self.dp;
        if !(0.0 <= a && a <= b && b <= 3.0) {
            return Err(DatasetError::InvalidParameter(format!("dp range [{a}, {b}] outside [0, 3]")));
        }
        let (a, b) = self.dphi;
        if !(-0.2 <= a && a <= b && b <= 0.2) {
            return Err(DatasetError::InvalidParameter(format!("dphi range [{a}, {b}] outside [-0.2, 0.2]")));
        }
        Ok(())
    }
}

/// Largest change of `dphi` between consecutive increments.
pub const MAX_DPHI_STEP: f64 = 0.02;

/// Smooth bounded random walk: each step adds a small mean-reverting kick,
/// limited so consecutive `dphi` differ by at most 0.02 rad, and clamps to the
/// ranges.
pub fn synth_increments(seed: u64, n: usize, ranges: &SynthRanges) -> Result<Vec<PoseIncrement>, DatasetError> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dp_lo, dp_hi) = ranges.dp;
    let (ph_lo, ph_hi) = ranges.dphi;
    let dp_mid = 0.5 * (dp_lo + dp_hi);
    let ph_mid = 0.5 * (ph_lo + ph_hi);
    let dp_step = 0.1 * (dp_hi - dp_lo);
    let mut dp = rng.gen_range(dp_lo..=dp_hi);
    let mut dphi = rng.gen_range(ph_lo..=ph_hi);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(PoseIncrement { dp, dphi });
        let kick = rng.gen_range(-1.0..=1.0) * dp_step - 0.05 * (dp - dp_mid);
        dp = (dp + kick.clamp(-dp_step, dp_step)).clamp(dp_lo, dp_hi);
        let kick = rng.gen_range(-1.0..=1.0) * MAX_DPHI_STEP - 0.1 * (dphi - ph_mid);
        dphi = (dphi + kick.clamp(-MAX_DPHI_STEP, MAX_DPHI_STEP)).clamp(ph_lo, ph_hi);
    }
    Ok(out)
}
