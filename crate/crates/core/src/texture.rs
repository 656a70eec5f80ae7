//! Smooth procedural value-noise texture used by the synthetic scenes.

use crate::flow::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueNoise {
    pub seed: u64,
    pub octaves: u32,
    /// Lattice spacing of the coarsest octave, in input units.
    pub cell: f64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(seed: u64, octave: u32, ix: i64, iy: i64) -> f64 {
    let h = splitmix(seed ^ splitmix((octave as u64) << 32 ^ splitmix(ix as u64 ^ splitmix(iy as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

// Quintic fade: C2 continuous, so sampled images have smooth gradients.
fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

impl ValueNoise {
    pub fn new(seed: u64, octaves: u32, cell: f64) -> Self {
        Self { seed, octaves: octaves.max(1), cell }
    }

    /// Noise value in `[0, 1]`.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let mut total = 0.0;
        let mut norm = 0.0;
        let mut amp = 1.0;
        let mut cell = self.cell;
        for o in 0..self.octaves {
            let (gx, gy) = (x / cell, y / cell);
            let (fx, fy) = (gx.floor(), gy.floor());
            let (tx, ty) = (fade(gx - fx), fade(gy - fy));
            let (ix, iy) = (fx as i64, fy as i64);
            let v00 = lattice(self.seed, o, ix, iy);
            let v10 = lattice(self.seed, o, ix + 1, iy);
            let v01 = lattice(self.seed, o, ix, iy + 1);
            let v11 = lattice(self.seed, o, ix + 1, iy + 1);
            let top = v00 + (v10 - v00) * tx;
            let bot = v01 + (v11 - v01) * tx;
            total += amp * (top + (bot - top) * ty);
            norm += amp;
            amp *= 0.5;
            cell *= 0.5;
        }
        (total / norm).clamp(0.0, 1.0)
    }

    /// Renders the noise on a pixel grid, with the content displaced by `(dx, dy)` pixels.
    pub fn image(&self, width: usize, height: usize, dx: f64, dy: f64) -> GrayImage {
        GrayImage::from_fn(width, height, |x, y| self.sample(x as f64 - dx, y as f64 - dy))
    }
}
