//! Batched layer kernels over `N×C×H×W` activations.

use crate::tensor::Scalar;

pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }
    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.positions();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let p = g.positions();
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward. Each image is its own GEMM so results never depend
/// on batch composition. When `keep_cols` is set the im2col buffers of all
/// images are returned for the backward pass.
pub(crate) fn conv_forward<T: Scalar>(
    g: &ConvGeom,
    n: usize,
    x: &[T],
    weight: &[T],
    bias: &[T],
    keep_cols: bool,
) -> (Vec<T>, Vec<T>) {
    let patch = g.patch();
    let p = g.positions();
    let in_len = g.c * g.h * g.w;
    let out_len = g.out_c * p;
    let mut out = vec![T::ZERO; n * out_len];
    let mut kept = if keep_cols {
        vec![T::ZERO; n * patch * p]
    } else {
        Vec::new()
    };
    let mut scratch = if keep_cols {
        Vec::new()
    } else {
        vec![T::ZERO; patch * p]
    };
    for i in 0..n {
        let cols: &mut [T] = if keep_cols {
            &mut kept[i * patch * p..(i + 1) * patch * p]
        } else {
            &mut scratch
        };
        im2col(g, &x[i * in_len..(i + 1) * in_len], cols);
        let y = &mut out[i * out_len..(i + 1) * out_len];
        for (o, b) in bias.iter().enumerate() {
            y[o * p..(o + 1) * p].fill(*b);
        }
        T::gemm(g.out_c, patch, p, weight, false, cols, false, T::ONE, y);
    }
    (out, kept)
}

/// Returns `(dx, dweight, dbias)`.
pub(crate) fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    n: usize,
    cols: &[T],
    dout: &[T],
    weight: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let patch = g.patch();
    let p = g.positions();
    let in_len = g.c * g.h * g.w;
    let out_len = g.out_c * p;
    let mut dx = vec![T::ZERO; n * in_len];
    let mut dw = vec![T::ZERO; g.out_c * patch];
    let mut db = vec![T::ZERO; g.out_c];
    let mut dcols = vec![T::ZERO; patch * p];
    for i in 0..n {
        let dy = &dout[i * out_len..(i + 1) * out_len];
        let c = &cols[i * patch * p..(i + 1) * patch * p];
        for (o, acc) in db.iter_mut().enumerate() {
            let s: f64 = dy[o * p..(o + 1) * p].iter().map(|v| v.to_f64()).sum();
            *acc += T::from_f64(s);
        }
        // dW += dY · colsᵀ
        T::gemm(g.out_c, p, patch, dy, false, c, true, T::ONE, &mut dw);
        // dcols = Wᵀ · dY
        T::gemm(patch, g.out_c, p, weight, true, dy, false, T::ZERO, &mut dcols);
        col2im(g, &dcols, &mut dx[i * in_len..(i + 1) * in_len]);
    }
    (dx, dw, db)
}

pub(crate) struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Batch statistics, present only in training mode.
    pub batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_forward<T: Scalar>(
    n: usize,
    c: usize,
    hw: usize,
    x: &[T],
    params: &[Vec<T>],
    eps: f64,
    train: bool,
    keep: bool,
) -> (Vec<T>, Option<BnCache<T>>) {
    let (gamma, beta, run_mean, run_var) = (&params[0], &params[1], &params[2], &params[3]);
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    if train {
        let count = (n * hw) as f64;
        for ch in 0..c {
            let mut s = 0.0;
            for i in 0..n {
                s += x[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                    .iter()
                    .map(|v| v.to_f64())
                    .sum::<f64>();
            }
            let m = s / count;
            let mut sq = 0.0;
            for i in 0..n {
                sq += x[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                    .iter()
                    .map(|v| (v.to_f64() - m).powi(2))
                    .sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = sq / count;
        }
    } else {
        for ch in 0..c {
            mean[ch] = run_mean[ch].to_f64();
            var[ch] = run_var[ch].to_f64();
        }
    }
    let inv_std: Vec<T> = var.iter().map(|v| T::from_f64(1.0 / (v + eps).sqrt())).collect();
    let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64(m)).collect();
    let mut out = vec![T::ZERO; x.len()];
    let mut xhat = if keep { vec![T::ZERO; x.len()] } else { Vec::new() };
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            let (m, s, gm, bt) = (mean_t[ch], inv_std[ch], gamma[ch], beta[ch]);
            for j in base..base + hw {
                let xh = (x[j] - m) * s;
                if keep {
                    xhat[j] = xh;
                }
                out[j] = gm * xh + bt;
            }
        }
    }
    let cache = keep.then(|| BnCache {
        xhat,
        inv_std,
        batch_stats: train.then_some((mean, var)),
    });
    (out, cache)
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn batchnorm_backward<T: Scalar>(
    n: usize,
    c: usize,
    hw: usize,
    cache: &BnCache<T>,
    gamma: &[T],
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::ZERO; dout.len()];
    let mut dgamma = vec![T::ZERO; c];
    let mut dbeta = vec![T::ZERO; c];
    let count = (n * hw) as f64;
    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for j in base..base + hw {
                sum_dy += dout[j].to_f64();
                sum_dy_xhat += (dout[j] * cache.xhat[j]).to_f64();
            }
        }
        dgamma[ch] = T::from_f64(sum_dy_xhat);
        dbeta[ch] = T::from_f64(sum_dy);
        let scale = gamma[ch] * cache.inv_std[ch];
        let training = cache.batch_stats.is_some();
        let (mean_dy, mean_dy_xhat) = (T::from_f64(sum_dy / count), T::from_f64(sum_dy_xhat / count));
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for j in base..base + hw {
                dx[j] = if training {
                    scale * (dout[j] - mean_dy - cache.xhat[j] * mean_dy_xhat)
                } else {
                    scale * dout[j]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn relu_forward<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::ZERO { v } else { T::ZERO }).collect()
}

pub(crate) fn relu_backward<T: Scalar>(out: &[T], dout: &[T]) -> Vec<T> {
    out.iter()
        .zip(dout)
        .map(|(&o, &d)| if o > T::ZERO { d } else { T::ZERO })
        .collect()
}

/// Returns pooled values and, per output, the flat input index of the max.
pub(crate) fn maxpool_forward<T: Scalar>(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    x: &[T],
) -> (Vec<T>, Vec<u32>) {
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_backward<T: Scalar>(in_len: usize, argmax: &[u32], dout: &[T]) -> Vec<T> {
    let mut dx = vec![T::ZERO; in_len];
    for (&a, &d) in argmax.iter().zip(dout) {
        dx[a as usize] += d;
    }
    dx
}

pub(crate) fn gap_forward<T: Scalar>(planes: usize, hw: usize, x: &[T]) -> Vec<T> {
    (0..planes)
        .map(|p| {
            let s: f64 = x[p * hw..(p + 1) * hw].iter().map(|v| v.to_f64()).sum();
            T::from_f64(s / hw as f64)
        })
        .collect()
}

pub(crate) fn gap_backward<T: Scalar>(planes: usize, hw: usize, dout: &[T]) -> Vec<T> {
    let scale = T::from_f64(1.0 / hw as f64);
    let mut dx = Vec::with_capacity(planes * hw);
    for &d in &dout[..planes] {
        dx.extend(std::iter::repeat_n(d * scale, hw));
    }
    dx
}

pub(crate) fn dense_forward<T: Scalar>(
    n: usize,
    inputs: usize,
    outputs: usize,
    x: &[T],
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let mut out = Vec::with_capacity(n * outputs);
    for _ in 0..n {
        out.extend_from_slice(bias);
    }
    T::gemm(n, inputs, outputs, x, false, weight, true, T::ONE, &mut out);
    out
}

/// Returns `(dx, dweight, dbias)`.
pub(crate) fn dense_backward<T: Scalar>(
    n: usize,
    inputs: usize,
    outputs: usize,
    x: &[T],
    weight: &[T],
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dw = vec![T::ZERO; outputs * inputs];
    T::gemm(outputs, n, inputs, dout, true, x, false, T::ZERO, &mut dw);
    let mut db = vec![T::ZERO; outputs];
    for (o, acc) in db.iter_mut().enumerate() {
        let s: f64 = (0..n).map(|i| dout[i * outputs + o].to_f64()).sum();
        *acc = T::from_f64(s);
    }
    let mut dx = vec![T::ZERO; n * inputs];
    T::gemm(n, outputs, inputs, dout, false, weight, false, T::ZERO, &mut dx);
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_direct_loop() {
        let g = ConvGeom {
            c: 2,
            h: 5,
            w: 4,
            out_c: 3,
            k: 3,
            stride: 2,
            pad: 1,
            ho: 3,
            wo: 2,
        };
        let x: Vec<f64> = (0..2 * 5 * 4).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let wt: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i * 3) % 5) as f64 - 2.0).collect();
        let b = vec![0.5, -1.0, 2.0];
        let (out, _) = conv_forward(&g, 1, &x, &wt, &b, false);
        for o in 0..3 {
            for oy in 0..3 {
                for ox in 0..2 {
                    let mut s = b[o];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy >= 0 && iy < 5 && ix >= 0 && ix < 4 {
                                    s += wt[((o * 2 + ci) * 3 + ky) * 3 + kx]
                                        * x[(ci * 5 + iy as usize) * 4 + ix as usize];
                                }
                            }
                        }
                    }
                    assert_eq!(out[(o * 3 + oy) * 2 + ox], s);
                }
            }
        }
    }

    #[test]
    fn maxpool_picks_window_max() {
        let x = vec![1.0f32, 5.0, 2.0, 0.0, 3.0, 4.0, -1.0, 9.0];
        let (out, arg) = maxpool_forward(1, 1, 2, 4, 2, 2, &x);
        assert_eq!(out, vec![5.0, 9.0]);
        assert_eq!(arg, vec![1, 7]);
    }
}
