//! Synthetic ground-plane sequences with exact ground truth, KITTI-layout
//! ingestion, and mini-batching.

mod batch;
mod kitti;
mod synth;

pub use batch::{batch_indices, make_batches};
pub use kitti::{load_kitti, quantize_8bit, read_gray_image, write_sequence, KittiSequence, LoadOptions, SequenceManifest};
pub use synth::{
    ground_flow, render_pair, render_sequence, render_view, synth_increments, CameraPose, Homography, Sample,
    SceneSpec, SynthRanges,
};

use std::path::PathBuf;

use thiserror::Error;

use crate::flow::FlowError;
use crate::geometry::GeometryError;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("{:.1}% of pixels leave the frame (limit 30%)", fraction * 100.0)]
    TooMuchMotion { fraction: f64 },
    #[error("missing {0}")]
    Missing(PathBuf),
    #[error("cannot read image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{poses} poses for {images} images")]
    PoseCount { poses: usize, images: usize },
    #[error("image {path} is {width}×{height}, smaller than the unified {want_w}×{want_h}")]
    TooSmall {
        path: PathBuf,
        width: usize,
        height: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("sequence has no ground-truth poses")]
    NoGroundTruth,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[cfg(test)]
mod tests;
