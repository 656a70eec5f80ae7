use super::image::bilinear;
use super::{FlowError, FlowField, GrayImage, ImageGradients, Pyramid};
use crate::Exec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LkParams {
    /// Odd side length of the least-squares window.
    pub window: usize,
    pub levels: usize,
    pub iters_per_level: usize,
    /// Threshold on the smaller eigenvalue of the window-averaged structure
    /// matrix; below it a pixel keeps the flow propagated from the coarser level.
    pub min_eigen: f64,
    pub exec: Exec,
}

impl Default for LkParams {
    fn default() -> Self {
        Self {
            window: 15,
            levels: 3,
            iters_per_level: 3,
            min_eigen: 1e-6,
            exec: Exec::default(),
        }
    }
}

fn spatial_gradients(img: &GrayImage) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (img.width, img.height);
    let mut ix = vec![0.0; w * h];
    let mut iy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            ix[i] = if w < 2 {
                0.0
            } else if x == 0 {
                img.get(1, y) - img.get(0, y)
            } else if x == w - 1 {
                img.get(w - 1, y) - img.get(w - 2, y)
            } else {
                0.5 * (img.get(x + 1, y) - img.get(x - 1, y))
            };
            iy[i] = if h < 2 {
                0.0
            } else if y == 0 {
                img.get(x, 1) - img.get(x, 0)
            } else if y == h - 1 {
                img.get(x, h - 1) - img.get(x, h - 2)
            } else {
                0.5 * (img.get(x, y + 1) - img.get(x, y - 1))
            };
        }
    }
    (ix, iy)
}

/// Central-difference `Ix`, `Iy` of `prev` (one-sided at the borders) and
/// `It = next - prev`.
pub fn gradients(prev: &GrayImage, next: &GrayImage) -> Result<ImageGradients, FlowError> {
    check_dims(prev, next)?;
    let (ix, iy) = spatial_gradients(prev);
    let it = next.data().iter().zip(prev.data()).map(|(b, a)| b - a).collect();
    Ok(ImageGradients {
        width: prev.width,
        height: prev.height,
        ix,
        iy,
        it,
    })
}

fn check_dims(a: &GrayImage, b: &GrayImage) -> Result<(), FlowError> {
    if a.width != b.width || a.height != b.height {
        return Err(FlowError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    Ok(())
}

/// Mean of `values` over the window of radius `r` clipped to the image.
fn box_mean(values: &[f64], w: usize, h: usize, r: usize, exec: Exec) -> Vec<f64> {
    let stride = w + 1;
    let mut integral = vec![0.0; stride * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += values[y * w + x];
            integral[(y + 1) * stride + x + 1] = integral[y * stride + x + 1] + row;
        }
    }
    let mut out = vec![0.0; w * h];
    exec.for_chunks(&mut out, w, |y, row| {
        let y0 = y.saturating_sub(r);
        let y1 = (y + r).min(h - 1) + 1;
        for (x, o) in row.iter_mut().enumerate() {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r).min(w - 1) + 1;
            let s = integral[y1 * stride + x1] - integral[y0 * stride + x1] - integral[y1 * stride + x0]
                + integral[y0 * stride + x0];
            *o = s / ((y1 - y0) * (x1 - x0)) as f64;
        }
    });
    out
}

/// Dense pyramidal Lucas–Kanade flow from `prev` to `next`.
pub fn lk_flow(prev: &GrayImage, next: &GrayImage, params: &LkParams) -> Result<FlowField, FlowError> {
    check_dims(prev, next)?;
    if params.window < 3 || params.window.is_multiple_of(2) {
        return Err(FlowError::InvalidParameter(format!(
            "window must be odd and at least 3, got {}",
            params.window
        )));
    }
    if params.levels == 0 {
        return Err(FlowError::InvalidParameter("levels must be at least 1".into()));
    }
    let prev_pyr = Pyramid::build(prev, params.levels, params.window)?;
    let next_pyr = Pyramid::build(next, params.levels, params.window)?;
    let r_win = params.window / 2;
    let exec = params.exec;

    let mut flow: Option<FlowField> = None;
    for level in (0..params.levels).rev() {
        let p = &prev_pyr.levels[level];
        let n = &next_pyr.levels[level];
        let (w, h) = (p.width, p.height);
        let mut f = match flow.take() {
            Some(coarse) => coarse.upsample_to(w, h),
            None => FlowField::zeros(w, h),
        };

        let (ix, iy) = spatial_gradients(p);
        let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x * y).collect() };
        let ixx = prod(&ix, &ix);
        let ixy = prod(&ix, &iy);
        let iyy = prod(&iy, &iy);
        let (wmax, hmax) = ((w - 1) as f64, (h - 1) as f64);

        // Each window pixel's residual is linearised to the centre pixel's
        // flow: r_j + grad_j . f_i with r_j = It_j - grad_j . f_j, so the
        // Gauss-Newton solve is f_i = -S_i^-1 box(grad r) and stays
        // box-filtered. Window pixels warped outside `next` are dropped.
        for _ in 0..params.iters_per_level {
            let mut r = vec![0.0; w * h];
            let mut m = vec![0.0; w * h];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let (tx, ty) = (x as f64 + f.u[i], y as f64 + f.v[i]);
                    if (0.0..=wmax).contains(&tx) && (0.0..=hmax).contains(&ty) {
                        m[i] = 1.0;
                        r[i] = bilinear(n.data(), w, h, tx, ty) - p.get(x, y) - ix[i] * f.u[i] - iy[i] * f.v[i];
                    }
                }
            }
            let sxx = box_mean(&prod(&m, &ixx), w, h, r_win, exec);
            let sxy = box_mean(&prod(&m, &ixy), w, h, r_win, exec);
            let syy = box_mean(&prod(&m, &iyy), w, h, r_win, exec);
            let bx = box_mean(&prod(&ix, &r), w, h, r_win, exec);
            let by = box_mean(&prod(&iy, &r), w, h, r_win, exec);
            let mut next_f = vec![[0.0f64; 2]; w * h];
            exec.for_chunks(&mut next_f, w, |y, row| {
                for (x, d) in row.iter_mut().enumerate() {
                    let i = y * w + x;
                    let (a, b, c) = (sxx[i], sxy[i], syy[i]);
                    let half_tr = 0.5 * (a + c);
                    let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
                    if half_tr - disc < params.min_eigen {
                        *d = [f.u[i], f.v[i]];
                        continue;
                    }
                    let det = a * c - b * b;
                    // + 0.0 folds a negative zero into zero
                    *d = [(b * by[i] - c * bx[i]) / det + 0.0, (b * bx[i] - a * by[i]) / det + 0.0];
                }
            });
            for (i, d) in next_f.iter().enumerate() {
                f.u[i] = d[0];
                f.v[i] = d[1];
            }
        }
        flow = Some(f);
    }
    Ok(flow.expect("at least one level"))
}
