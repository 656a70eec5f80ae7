//! Forward and backward kernels operating on raw row-major slices.

/// Output extent of a strided window over a zero-padded axis, or `None` when
/// the window does not fit.
pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

/// Same arithmetic as [`conv2d_output_size`]; pooling windows use the identical formula.
pub fn pool2d_output_size(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    conv2d_output_size(input, k, stride, pad)
}

/// Range of output positions `o` for which `o * stride + offset - pad` lands
/// inside `[0, n_in)`.
#[inline]
fn valid_range(n_out: usize, n_in: usize, stride: usize, pad: usize, offset: usize) -> (usize, usize) {
    let lo = if pad > offset {
        (pad - offset).div_ceil(stride)
    } else {
        0
    };
    if n_in + pad < offset + 1 {
        return (0, 0);
    }
    let hi = ((n_in - 1 + pad - offset) / stride + 1).min(n_out);
    if lo >= hi {
        (0, 0)
    } else {
        (lo, hi)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.o * plane];
    for o in 0..g.o {
        let out_o = &mut out[o * plane..(o + 1) * plane];
        out_o.iter_mut().for_each(|v| *v = bias[o]);
        for c in 0..g.c {
            let in_c = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = valid_range(g.oh, g.h, g.stride, g.pad, ky);
                for kx in 0..g.kw {
                    let wv = kernel[((o * g.c + c) * g.kh + ky) * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = valid_range(g.ow, g.w, g.stride, g.pad, kx);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let row = &in_c[iy * g.w..(iy + 1) * g.w];
                        let out_row = &mut out_o[oy * g.ow..(oy + 1) * g.ow];
                        for ox in ox_lo..ox_hi {
                            out_row[ox] += wv * row[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d_input, d_kernel, d_bias)`; each is computed only when requested.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    dout: &[f64],
    need: [bool; 3],
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let plane = g.oh * g.ow;
    let mut dinput = need[0].then(|| vec![0.0; g.c * g.h * g.w]);
    let mut dkernel = need[1].then(|| vec![0.0; kernel.len()]);
    let dbias = need[2].then(|| {
        (0..g.o)
            .map(|o| dout[o * plane..(o + 1) * plane].iter().sum())
            .collect()
    });
    if dinput.is_none() && dkernel.is_none() {
        return (None, None, dbias);
    }
    for o in 0..g.o {
        let dout_o = &dout[o * plane..(o + 1) * plane];
        for c in 0..g.c {
            let base = c * g.h * g.w;
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = valid_range(g.oh, g.h, g.stride, g.pad, ky);
                for kx in 0..g.kw {
                    let widx = ((o * g.c + c) * g.kh + ky) * g.kw + kx;
                    let (ox_lo, ox_hi) = valid_range(g.ow, g.w, g.stride, g.pad, kx);
                    let mut acc = 0.0;
                    let wv = kernel[widx];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let row = base + iy * g.w;
                        let drow = &dout_o[oy * g.ow..(oy + 1) * g.ow];
                        if dkernel.is_some() {
                            for ox in ox_lo..ox_hi {
                                acc += drow[ox] * input[row + ox * g.stride + kx - g.pad];
                            }
                        }
                        if let Some(di) = dinput.as_mut() {
                            if wv != 0.0 {
                                for ox in ox_lo..ox_hi {
                                    di[row + ox * g.stride + kx - g.pad] += wv * drow[ox];
                                }
                            }
                        }
                    }
                    if let Some(dk) = dkernel.as_mut() {
                        dk[widx] += acc;
                    }
                }
            }
        }
    }
    (dinput, dkernel, dbias)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PoolGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Average pooling counts padded cells as zeros (divisor is always `k*k`).
pub(crate) fn avg_pool_forward(g: &PoolGeom, input: &[f64]) -> Vec<f64> {
    let scale = 1.0 / (g.k * g.k) as f64;
    let mut out = vec![0.0; g.c * g.oh * g.ow];
    for c in 0..g.c {
        let in_c = &input[c * g.h * g.w..];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = 0.0;
                for ky in 0..g.k {
                    let Some(iy) = (oy * g.stride + ky).checked_sub(g.pad).filter(|&y| y < g.h) else {
                        continue;
                    };
                    for kx in 0..g.k {
                        if let Some(ix) = (ox * g.stride + kx).checked_sub(g.pad).filter(|&x| x < g.w) {
                            acc += in_c[iy * g.w + ix];
                        }
                    }
                }
                out[(c * g.oh + oy) * g.ow + ox] = acc * scale;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(g: &PoolGeom, dout: &[f64]) -> Vec<f64> {
    let scale = 1.0 / (g.k * g.k) as f64;
    let mut din = vec![0.0; g.c * g.h * g.w];
    for c in 0..g.c {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let d = dout[(c * g.oh + oy) * g.ow + ox] * scale;
                for ky in 0..g.k {
                    let Some(iy) = (oy * g.stride + ky).checked_sub(g.pad).filter(|&y| y < g.h) else {
                        continue;
                    };
                    for kx in 0..g.k {
                        if let Some(ix) = (ox * g.stride + kx).checked_sub(g.pad).filter(|&x| x < g.w) {
                            din[(c * g.h + iy) * g.w + ix] += d;
                        }
                    }
                }
            }
        }
    }
    din
}

/// Max pooling over in-bounds cells only. Returns the output and, per output
/// cell, the flat input index of the first (row-major) maximal element.
pub(crate) fn max_pool_forward(g: &PoolGeom, input: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let n = g.c * g.oh * g.ow;
    let mut out = vec![0.0; n];
    let mut arg = vec![0usize; n];
    for c in 0..g.c {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ky in 0..g.k {
                    let Some(iy) = (oy * g.stride + ky).checked_sub(g.pad).filter(|&y| y < g.h) else {
                        continue;
                    };
                    for kx in 0..g.k {
                        if let Some(ix) = (ox * g.stride + kx).checked_sub(g.pad).filter(|&x| x < g.w) {
                            let idx = (c * g.h + iy) * g.w + ix;
                            if best_idx == usize::MAX || input[idx] > best {
                                best = input[idx];
                                best_idx = idx;
                            }
                        }
                    }
                }
                let o = (c * g.oh + oy) * g.ow + ox;
                out[o] = best;
                arg[o] = best_idx;
            }
        }
    }
    (out, arg)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_bruteforce() {
        for n_in in 1..9 {
            for k in 1..6 {
                for stride in 1..4 {
                    for pad in 0..4 {
                        let Some(n_out) = conv2d_output_size(n_in, k, stride, pad) else {
                            continue;
                        };
                        for off in 0..k {
                            let (lo, hi) = valid_range(n_out, n_in, stride, pad, off);
                            let brute: Vec<usize> = (0..n_out)
                                .filter(|&o| {
                                    let p = (o * stride + off) as isize - pad as isize;
                                    p >= 0 && (p as usize) < n_in
                                })
                                .collect();
                            let got: Vec<usize> = (lo..hi).collect();
                            assert_eq!(got, brute, "n_in={n_in} k={k} s={stride} p={pad} off={off}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn output_size_formula() {
        assert_eq!(conv2d_output_size(93, 9, 2, 4), Some(47));
        assert_eq!(conv2d_output_size(154, 9, 2, 4), Some(77));
        assert_eq!(conv2d_output_size(2, 3, 1, 0), None);
        assert_eq!(conv2d_output_size(4, 2, 0, 0), None);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(30.0) < 1.0);
    }
}
