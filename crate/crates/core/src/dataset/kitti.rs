use std::fs;
use std::path::{Path, PathBuf};

use crate::flow::GrayImage;
use crate::geometry::{decompose_sequence, read_kitti_poses, write_kitti_poses, PoseIncrement, PoseMatrix};
use crate::Exec;

use super::{DatasetError, Sample};

/// Ordered frames of one sequence and where its poses came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceManifest {
    pub images: Vec<PathBuf>,
    pub poses: Option<PathBuf>,
    /// Unified frame size after cropping.
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Centre-crop every frame to this size; `None` keeps the first frame's size.
    pub size: Option<(usize, usize)>,
    /// Keep every `stride`-th frame.
    pub stride: usize,
    /// Pose file; defaults to `<dir>/poses.txt` when present.
    pub poses: Option<PathBuf>,
    pub exec: Exec,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            size: None,
            stride: 1,
            poses: None,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KittiSequence {
    pub manifest: SequenceManifest,
    pub images: Vec<GrayImage>,
    pub poses: Option<Vec<PoseMatrix>>,
    pub increments: Option<Vec<PoseIncrement>>,
}

impl KittiSequence {
    /// Consecutive frame pairs with their ground-truth increments.
    pub fn samples(&self) -> Result<Vec<Sample>, DatasetError> {
        let incs = self.increments.as_ref().ok_or(DatasetError::NoGroundTruth)?;
        Ok(self
            .images
            .windows(2)
            .zip(incs)
            .map(|(w, gt)| Sample {
                prev: w[0].clone(),
                next: w[1].clone(),
                gt: *gt,
            })
            .collect())
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&GrayImage, &GrayImage)> {
        self.images.windows(2).map(|w| (&w[0], &w[1]))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn pngs_in(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let p = entry.map_err(io_err(dir))?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// PNGs of `<dir>/image_2`, or of `dir` itself when it has no `image_2`.
fn list_images(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let img_dir = dir.join("image_2");
    if img_dir.is_dir() {
        return pngs_in(&img_dir);
    }
    if dir.is_dir() {
        let direct = pngs_in(dir)?;
        if !direct.is_empty() {
            return Ok(direct);
        }
    }
    Err(DatasetError::Missing(img_dir))
}

fn luma8(r: u8, g: u8, b: u8) -> f64 {
    let l = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
    (l / 255.0).clamp(0.0, 1.0)
}

/// The value an intensity takes after an 8-bit PNG round trip through
/// [`write_sequence`] and [`read_gray_image`].
pub fn quantize_8bit(img: &GrayImage) -> GrayImage {
    GrayImage::from_fn(img.width, img.height, |x, y| {
        let q = to_u8(img.get(x, y));
        luma8(q, q, q)
    })
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Reads an image file as luma in `[0, 1]`.
pub fn read_gray_image(path: impl AsRef<Path>) -> Result<GrayImage, DatasetError> {
    load_gray(path.as_ref(), None)
}

/// Luma of an 8-bit image scaled to `[0, 1]`, centre-cropped to `size`.
fn load_gray(path: &Path, size: Option<(usize, usize)>) -> Result<GrayImage, DatasetError> {
    let img = image::open(path)
        .map_err(|source| DatasetError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (tw, th) = size.unwrap_or((w, h));
    if w < tw || h < th {
        return Err(DatasetError::TooSmall {
            path: path.to_path_buf(),
            width: w,
            height: h,
            want_w: tw,
            want_h: th,
        });
    }
    let (x0, y0) = ((w - tw) / 2, (h - th) / 2);
    let data = (0..th)
        .flat_map(|y| (0..tw).map(move |x| (x, y)))
        .map(|(x, y)| {
            let p = img.get_pixel((x0 + x) as u32, (y0 + y) as u32).0;
            luma8(p[0], p[1], p[2])
        })
        .collect();
    Ok(GrayImage::new(tw, th, data)?)
}

/// Loads `<dir>/image_2/*.png` (or `<dir>/*.png`) in name order, with
/// optional KITTI poses.
pub fn load_kitti(dir: impl AsRef<Path>, opts: &LoadOptions) -> Result<KittiSequence, DatasetError> {
    let dir = dir.as_ref();
    if opts.stride == 0 {
        return Err(DatasetError::InvalidParameter("stride must be at least 1".into()));
    }
    let all = list_images(dir)?;
    let pose_path = match &opts.poses {
        Some(p) if !p.is_file() => return Err(DatasetError::Missing(p.clone())),
        Some(p) => Some(p.clone()),
        None => Some(dir.join("poses.txt")).filter(|p| p.is_file()),
    };
    let poses_all = pose_path.as_ref().map(read_kitti_poses).transpose()?;
    if let Some(p) = &poses_all {
        if p.len() != all.len() {
            return Err(DatasetError::PoseCount {
                poses: p.len(),
                images: all.len(),
            });
        }
    }
    let images: Vec<PathBuf> = all.iter().step_by(opts.stride).cloned().collect();
    if images.len() < 2 {
        return Err(DatasetError::InvalidParameter(format!(
            "need at least 2 frames, found {}",
            images.len()
        )));
    }
    let poses: Option<Vec<PoseMatrix>> = poses_all.map(|p| p.into_iter().step_by(opts.stride).collect());

    let size = match opts.size {
        Some(s) => s,
        None => {
            let first = load_gray(&images[0], None)?;
            (first.width, first.height)
        }
    };
    let frames = opts.exec.map(images.len(), |i| load_gray(&images[i], Some(size)));
    let frames = frames.into_iter().collect::<Result<Vec<_>, _>>()?;
    let increments = poses.as_deref().map(decompose_sequence).transpose()?;
    Ok(KittiSequence {
        manifest: SequenceManifest {
            images,
            poses: pose_path,
            width: size.0,
            height: size.1,
        },
        images: frames,
        poses,
        increments,
    })
}

/// Writes frames as 8-bit `image_2/NNNNNN.png` plus `poses.txt`.
pub fn write_sequence(
    dir: impl AsRef<Path>,
    images: &[GrayImage],
    poses: Option<&[PoseMatrix]>,
) -> Result<(), DatasetError> {
    let dir = dir.as_ref();
    let img_dir = dir.join("image_2");
    fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    for (i, img) in images.iter().enumerate() {
        let path = img_dir.join(format!("{i:06}.png"));
        let buf: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
        image::GrayImage::from_raw(img.width as u32, img.height as u32, buf)
            .expect("buffer matches dimensions")
            .save(&path)
            .map_err(|source| DatasetError::Image { path, source })?;
    }
    if let Some(p) = poses {
        write_kitti_poses(p, dir.join("poses.txt"))?;
    }
    Ok(())
}
