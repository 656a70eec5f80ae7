use super::FlowError;

/// Grayscale image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, FlowError> {
        if width == 0 || height == 0 {
            return Err(FlowError::InvalidImage(format!("empty image {width}×{height}")));
        }
        if data.len() != width * height {
            return Err(FlowError::InvalidImage(format!(
                "{width}×{height} image needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(FlowError::InvalidImage(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self { width, height, data })
    }

    /// Builds an image from `f(x, y)`, clamping values into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self { width, height, data }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample with coordinates clamped to the border.
    #[inline]
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        bilinear(&self.data, self.width, self.height, x, y)
    }

    /// 2×2 mean downsample with floored dimensions.
    pub fn downsample(&self) -> GrayImage {
        let (w, h) = (self.width / 2, self.height / 2);
        GrayImage::from_fn(w, h, |x, y| {
            0.25 * (self.get(2 * x, 2 * y)
                + self.get(2 * x + 1, 2 * y)
                + self.get(2 * x, 2 * y + 1)
                + self.get(2 * x + 1, 2 * y + 1))
        })
    }
}

#[inline]
pub(crate) fn bilinear(data: &[f64], width: usize, height: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (width - 1) as f64);
    let y = y.clamp(0.0, (height - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = data[y0 * width + x0] * (1.0 - fx) + data[y0 * width + x1] * fx;
    let bot = data[y1 * width + x0] * (1.0 - fx) + data[y1 * width + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Per-pixel motion in pixels/frame; `u` horizontal, `v` vertical.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self, FlowError> {
        if width == 0 || height == 0 {
            return Err(FlowError::InvalidImage(format!("empty flow field {width}×{height}")));
        }
        let n = width * height;
        if u.len() != n || v.len() != n {
            return Err(FlowError::InvalidImage(format!(
                "flow field {width}×{height} needs {n} values per channel"
            )));
        }
        if !u.iter().chain(&v).all(|x| x.is_finite()) {
            return Err(FlowError::InvalidImage("flow contains non-finite values".into()));
        }
        Ok(Self { width, height, u, v })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> Self {
        let mut out = Self::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = f(x, y);
                out.u[y * width + x] = u;
                out.v[y * width + x] = v;
            }
        }
        out
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn mean_magnitude(&self) -> f64 {
        let n = self.u.len() as f64;
        self.u.iter().zip(&self.v).map(|(u, v)| u.hypot(*v)).sum::<f64>() / n
    }

    /// Rectangular crop `[x0, x0 + w) × [y0, y0 + h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> FlowField {
        FlowField::from_fn(w, h, |x, y| self.at(x0 + x, y0 + y))
    }

    /// Resamples to a finer level, scaling vectors by the size ratio.
    pub(crate) fn upsample_to(&self, width: usize, height: usize) -> FlowField {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        FlowField::from_fn(width, height, |x, y| {
            let cx = (x as f64 + 0.5) / sx - 0.5;
            let cy = (y as f64 + 0.5) / sy - 0.5;
            (
                bilinear(&self.u, self.width, self.height, cx, cy) * sx,
                bilinear(&self.v, self.width, self.height, cx, cy) * sy,
            )
        })
    }
}

/// Spatial gradients of the earlier frame and the temporal difference.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGradients {
    pub width: usize,
    pub height: usize,
    pub ix: Vec<f64>,
    pub iy: Vec<f64>,
    pub it: Vec<f64>,
}

/// Image pyramid; level 0 is full resolution.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub levels: Vec<GrayImage>,
}

impl Pyramid {
    /// Builds `levels` levels, rejecting any level smaller than `window`.
    pub fn build(img: &GrayImage, levels: usize, window: usize) -> Result<Self, FlowError> {
        if levels == 0 {
            return Err(FlowError::InvalidParameter("pyramid needs at least one level".into()));
        }
        let mut out = vec![img.clone()];
        for _ in 1..levels {
            let next = out.last().expect("non-empty").downsample();
            out.push(next);
        }
        for (level, l) in out.iter().enumerate() {
            if l.width < window || l.height < window {
                return Err(FlowError::TooSmall {
                    level,
                    width: l.width,
                    height: l.height,
                    window,
                });
            }
        }
        Ok(Self { levels: out })
    }
}
