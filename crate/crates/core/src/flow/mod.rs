//! Dense optical flow from brightness constancy.
//!
//! Linearizing `I(x + u, y + v, t + 1) = I(x, y, t)` gives one constraint
//! `Ix·u + Iy·v = -It` per pixel; [`lk_flow`] solves it in the least-squares
//! sense over a square window, iterating with warping on a coarse-to-fine
//! pyramid.

mod flo;
mod image;
mod lk;

pub use flo::{decode_flo, encode_flo, read_flo, write_flo, FLO_MAGIC};
pub use image::{FlowField, GrayImage, ImageGradients, Pyramid};
pub use lk::{gradients, lk_flow, LkParams};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("dimension mismatch: {0}×{1} vs {2}×{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("pyramid level {level} is {width}×{height}, smaller than the {window}-pixel window")]
    TooSmall {
        level: usize,
        width: usize,
        height: usize,
        window: usize,
    },
    #[error("invalid image data: {0}")]
    InvalidImage(String),
    #[error("bad .flo magic number {0}")]
    BadMagic(f32),
    #[error("truncated .flo payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("non-positive .flo dimensions {0}×{1}")]
    BadDimensions(i32, i32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mean endpoint error over pixels at least `margin` away from every border.
pub fn flow_epe(est: &FlowField, gt: &FlowField, margin: usize) -> Result<f64, FlowError> {
    if est.width != gt.width || est.height != gt.height {
        return Err(FlowError::DimensionMismatch(est.width, est.height, gt.width, gt.height));
    }
    if 2 * margin >= est.width.min(est.height) {
        return Err(FlowError::InvalidParameter(format!(
            "margin {margin} leaves no interior in {}×{}",
            est.width, est.height
        )));
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for y in margin..est.height - margin {
        for x in margin..est.width - margin {
            let i = y * est.width + x;
            acc += (est.u[i] - gt.u[i]).hypot(est.v[i] - gt.v[i]);
            n += 1;
        }
    }
    Ok(acc / n as f64)
}
