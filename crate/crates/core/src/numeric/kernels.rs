//! Forward and backward kernels on raw row-major buffers.
//!
//! Every function here is shape-checked by its caller in [`super::graph`];
//! the kernels themselves only assert internal consistency.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// Geometry of a stride-1, zero-padded 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kernel_h
    }

    pub fn out_w(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kernel_w
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }
}

fn im2col(geo: &ConvGeometry, image: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (geo.out_h(), geo.out_w());
    let plane = geo.height * geo.width;
    debug_assert_eq!(cols.len(), geo.patch_len() * oh * ow);
    for ci in 0..geo.in_channels {
        let src = &image[ci * plane..(ci + 1) * plane];
        for ky in 0..geo.kernel_h {
            for kx in 0..geo.kernel_w {
                let row = (ci * geo.kernel_h + ky) * geo.kernel_w + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - geo.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= geo.height as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src_line = &src[iy as usize * geo.width..(iy as usize + 1) * geo.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - geo.pad as isize;
                        *v = if ix < 0 || ix >= geo.width as isize {
                            0.0
                        } else {
                            src_line[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(geo: &ConvGeometry, cols: &[f64], image: &mut [f64]) {
    let (oh, ow) = (geo.out_h(), geo.out_w());
    let plane = geo.height * geo.width;
    for ci in 0..geo.in_channels {
        let dst = &mut image[ci * plane..(ci + 1) * plane];
        for ky in 0..geo.kernel_h {
            for kx in 0..geo.kernel_w {
                let row = (ci * geo.kernel_h + ky) * geo.kernel_w + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - geo.pad as isize;
                    if iy < 0 || iy >= geo.height as isize {
                        continue;
                    }
                    let base = iy as usize * geo.width;
                    for ox in 0..ow {
                        let ix = ox as isize + kx as isize - geo.pad as isize;
                        if ix >= 0 && ix < geo.width as isize {
                            dst[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn view(data: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("buffer sized by caller")
}

fn view_mut(data: &mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("buffer sized by caller")
}

pub fn conv2d_forward(geo: &ConvGeometry, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let (oh, ow) = (geo.out_h(), geo.out_w());
    let spatial = oh * ow;
    let k = geo.patch_len();
    let in_len = geo.in_channels * geo.height * geo.width;
    let out_len = geo.out_channels * spatial;
    let mut out = vec![0.0; geo.batch * out_len];
    let mut cols = vec![0.0; k * spatial];
    let w = view(weight, geo.out_channels, k);
    for b in 0..geo.batch {
        im2col(geo, &input[b * in_len..(b + 1) * in_len], &mut cols);
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        for (co, chunk) in dst.chunks_mut(spatial).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias[co]);
        }
        let mut c = view_mut(dst, geo.out_channels, spatial);
        general_mat_mul(1.0, &w, &view(&cols, k, spatial), 1.0, &mut c);
    }
    out
}

pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(
    geo: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need_input: bool,
) -> ConvGrads {
    let spatial = geo.out_h() * geo.out_w();
    let k = geo.patch_len();
    let in_len = geo.in_channels * geo.height * geo.width;
    let out_len = geo.out_channels * spatial;
    let mut grad_w = vec![0.0; geo.out_channels * k];
    let mut grad_b = vec![0.0; geo.out_channels];
    let mut grad_in = need_input.then(|| vec![0.0; geo.batch * in_len]);
    let mut cols = vec![0.0; k * spatial];
    let mut dcols = vec![0.0; k * spatial];
    let w = view(weight, geo.out_channels, k);
    for b in 0..geo.batch {
        let g = &grad_out[b * out_len..(b + 1) * out_len];
        for (co, chunk) in g.chunks(spatial).enumerate() {
            grad_b[co] += chunk.iter().sum::<f64>();
        }
        let gv = view(g, geo.out_channels, spatial);
        im2col(geo, &input[b * in_len..(b + 1) * in_len], &mut cols);
        {
            let mut gw = view_mut(&mut grad_w, geo.out_channels, k);
            general_mat_mul(1.0, &gv, &view(&cols, k, spatial).t(), 1.0, &mut gw);
        }
        if let Some(gi) = grad_in.as_mut() {
            let mut dc = view_mut(&mut dcols, k, spatial);
            general_mat_mul(1.0, &w.t(), &gv, 0.0, &mut dc);
            col2im_add(geo, &dcols, &mut gi[b * in_len..(b + 1) * in_len]);
        }
    }
    ConvGrads {
        input: grad_in,
        weight: grad_w,
        bias: grad_b,
    }
}

/// Per-channel statistics over the (batch, height, width) axes of an NCHW buffer.
pub fn channel_moments(input: &[f64], batch: usize, channels: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (batch * plane) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let mut s = 0.0;
        for b in 0..batch {
            let off = (b * channels + c) * plane;
            s += input[off..off + plane].iter().sum::<f64>();
        }
        let mu = s / n;
        let mut ss = 0.0;
        for b in 0..batch {
            let off = (b * channels + c) * plane;
            ss += input[off..off + plane].iter().map(|x| (x - mu) * (x - mu)).sum::<f64>();
        }
        mean[c] = mu;
        var[c] = ss / n;
    }
    (mean, var)
}

/// Normalizes with the given per-channel statistics; returns `(output, x_hat)`.
pub fn batchnorm_apply(
    input: &[f64],
    batch: usize,
    channels: usize,
    plane: usize,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; input.len()];
    let mut xhat = vec![0.0; input.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * plane;
            for i in off..off + plane {
                let h = (input[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                out[i] = gamma[c] * h + beta[c];
            }
        }
    }
    (out, xhat)
}

/// Gradients of `sum(gamma * x_hat + beta)`-style outputs w.r.t. gamma and beta.
pub fn batchnorm_affine_grads(
    grad_out: &[f64],
    xhat: &[f64],
    batch: usize,
    channels: usize,
    plane: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * plane;
            for i in off..off + plane {
                dgamma[c] += grad_out[i] * xhat[i];
                dbeta[c] += grad_out[i];
            }
        }
    }
    (dgamma, dbeta)
}

/// Input gradient when the statistics were computed from the batch itself.
pub fn batchnorm_train_input_grad(
    grad_out: &[f64],
    xhat: &[f64],
    batch: usize,
    channels: usize,
    plane: usize,
    gamma: &[f64],
    inv_std: &[f64],
) -> Vec<f64> {
    let n = (batch * plane) as f64;
    let (sum_dxhat_xhat, sum_dxhat) = {
        let (a, b) = batchnorm_affine_grads(grad_out, xhat, batch, channels, plane);
        (
            a.iter().zip(gamma).map(|(v, g)| v * g).collect::<Vec<_>>(),
            b.iter().zip(gamma).map(|(v, g)| v * g).collect::<Vec<_>>(),
        )
    };
    let mut dx = vec![0.0; grad_out.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * plane;
            let scale = inv_std[c] / n;
            for i in off..off + plane {
                let dxhat = grad_out[i] * gamma[c];
                dx[i] = scale * (n * dxhat - sum_dxhat[c] - xhat[i] * sum_dxhat_xhat[c]);
            }
        }
    }
    dx
}

pub fn leaky_relu_forward(input: &[f64], slope: f64) -> Vec<f64> {
    input.iter().map(|&x| if x > 0.0 { x } else { slope * x }).collect()
}

/// Derivative is 1 for `x > 0` and `slope` otherwise, including at exactly 0.
pub fn leaky_relu_backward(input: &[f64], grad_out: &[f64], slope: f64) -> Vec<f64> {
    input
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x > 0.0 { g } else { slope * g })
        .collect()
}

/// 2x2/stride-2 max pooling. Returns the pooled values and, per output cell,
/// the flat input index of the first maximum in row-major window order.
pub fn maxpool2_forward(input: &[f64], planes: usize, height: usize, width: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (height / 2, width / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * height * width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + 2 * oy * width + 2 * ox;
                let mut best = input[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * width + 2 * ox + dx;
                    if input[idx] > best {
                        best = input[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2_backward(grad_out: &[f64], argmax: &[usize], input_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (&g, &idx) in grad_out.iter().zip(argmax) {
        dx[idx] += g;
    }
    dx
}

/// Two-tap blend weights for one destination index of a x2 upsample:
/// source coordinate `(t + 0.5) / 2 - 0.5`, clamped to `[0, size - 1]`.
#[derive(Clone, Copy, Debug)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub fn upsample_taps(size: usize) -> Vec<Tap> {
    let max = (size - 1) as f64;
    (0..2 * size)
        .map(|t| {
            let src = ((t as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, max);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(size - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

pub fn upsample2_forward(input: &[f64], planes: usize, height: usize, width: usize) -> Vec<f64> {
    let ys = upsample_taps(height);
    let xs = upsample_taps(width);
    let (oh, ow) = (2 * height, 2 * width);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * height * width..(p + 1) * height * width];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, ty) in ys.iter().enumerate() {
            let r0 = &src[ty.lo * width..(ty.lo + 1) * width];
            let r1 = &src[ty.hi * width..(ty.hi + 1) * width];
            for (ox, tx) in xs.iter().enumerate() {
                let top = r0[tx.lo] * (1.0 - tx.frac) + r0[tx.hi] * tx.frac;
                let bottom = r1[tx.lo] * (1.0 - tx.frac) + r1[tx.hi] * tx.frac;
                dst[oy * ow + ox] = top * (1.0 - ty.frac) + bottom * ty.frac;
            }
        }
    }
    out
}

/// Transpose of [`upsample2_forward`]: scatters each output gradient back
/// through its four blend weights.
pub fn upsample2_backward(grad_out: &[f64], planes: usize, height: usize, width: usize) -> Vec<f64> {
    let ys = upsample_taps(height);
    let xs = upsample_taps(width);
    let (oh, ow) = (2 * height, 2 * width);
    let mut dx = vec![0.0; planes * height * width];
    for p in 0..planes {
        let g = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * height * width..(p + 1) * height * width];
        for (oy, ty) in ys.iter().enumerate() {
            for (ox, tx) in xs.iter().enumerate() {
                let v = g[oy * ow + ox];
                let top = v * (1.0 - ty.frac);
                let bottom = v * ty.frac;
                dst[ty.lo * width + tx.lo] += top * (1.0 - tx.frac);
                dst[ty.lo * width + tx.hi] += top * tx.frac;
                dst[ty.hi * width + tx.lo] += bottom * (1.0 - tx.frac);
                dst[ty.hi * width + tx.hi] += bottom * tx.frac;
            }
        }
    }
    dx
}

/// `out = a^T b` for column-major descriptor blocks `a: [d, p]`, `b: [d, q]`.
pub fn matmul_tn(a: &[f64], b: &[f64], d: usize, p: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * q];
    let mut c = view_mut(&mut out, p, q);
    general_mat_mul(1.0, &view(a, d, p).t(), &view(b, d, q), 0.0, &mut c);
    out
}

/// `out = a b^T` for `a: [r, k]`, `b: [c, k]`.
pub fn matmul_nt(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    let mut o = view_mut(&mut out, r, c);
    general_mat_mul(1.0, &view(a, r, k), &view(b, c, k).t(), 0.0, &mut o);
    out
}

/// `out = a b` for `a: [r, k]`, `b: [k, c]`.
pub fn matmul_nn(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    let mut o = view_mut(&mut out, r, c);
    general_mat_mul(1.0, &view(a, r, k), &view(b, k, c), 0.0, &mut o);
    out
}
