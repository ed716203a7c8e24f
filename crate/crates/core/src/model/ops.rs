//! Forward and backward kernels over NCHW activations.

use rayon::prelude::*;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch of feature maps, NCHW row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Act {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn item(&self, i: usize) -> &[f64] {
        let l = self.item_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn same_shape(&self) -> Self {
        Self::zeros(self.n, self.c, self.h, self.w)
    }

    pub fn add_assign(&mut self, other: &Act) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

// ---------------------------------------------------------------------------
// Matrix products on row-major slices (accumulating into `c`).

/// c[m x n] += a[m x k] * b[k x n]
fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m x n] += a[m x k] * b[n x k]^T
fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

/// c[m x n] += a[k x m]^T * b[k x n]
fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_side(&self, side: usize) -> usize {
        (side + 2 * self.pad - self.k) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize, col: &mut [f64]) {
    let p = oh * ow;
    for ci in 0..g.cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize, dx: &mut [f64]) {
    let p = oh * ow;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            line[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution without bias. `weight` is `[cout, cin, k, k]`.
pub fn conv_forward(x: &Act, weight: &[f64], g: &ConvGeom) -> Act {
    assert_eq!(x.c, g.cin, "conv input channels");
    let (oh, ow) = (g.out_side(x.h), g.out_side(x.w));
    let kk = g.cin * g.k * g.k;
    let mut y = Act::zeros(x.n, g.cout, oh, ow);
    let out_len = y.item_len();
    y.data
        .par_chunks_mut(out_len)
        .enumerate()
        .for_each(|(i, out)| {
            let xi = x.item(i);
            if g.is_pointwise() {
                gemm_nn(g.cout, kk, oh * ow, weight, xi, out);
            } else {
                let mut col = vec![0.0; kk * oh * ow];
                im2col(xi, x.h, x.w, g, oh, ow, &mut col);
                gemm_nn(g.cout, kk, oh * ow, weight, &col, out);
            }
        });
    y
}

/// Accumulates the kernel gradient into `dw` (when given) and returns the
/// input gradient (when requested).
pub fn conv_backward(
    x: &Act,
    weight: &[f64],
    g: &ConvGeom,
    dy: &Act,
    dw: Option<&mut [f64]>,
    need_dx: bool,
) -> Option<Act> {
    let (oh, ow) = (dy.h, dy.w);
    let kk = g.cin * g.k * g.k;
    let p = oh * ow;
    if let Some(dw) = dw {
        // Items are reduced in order so the result does not depend on scheduling.
        let mut col = vec![0.0; kk * p];
        for i in 0..x.n {
            let cols: &[f64] = if g.is_pointwise() {
                x.item(i)
            } else {
                im2col(x.item(i), x.h, x.w, g, oh, ow, &mut col);
                &col
            };
            gemm_nt(g.cout, p, kk, dy.item(i), cols, dw);
        }
    }
    if !need_dx {
        return None;
    }
    let mut dx = x.same_shape();
    let in_len = dx.item_len();
    dx.data
        .par_chunks_mut(in_len)
        .enumerate()
        .for_each(|(i, dxi)| {
            if g.is_pointwise() {
                gemm_tn(kk, g.cout, p, weight, dy.item(i), dxi);
            } else {
                let mut dcol = vec![0.0; kk * p];
                gemm_tn(kk, g.cout, p, weight, dy.item(i), &mut dcol);
                col2im(&dcol, x.h, x.w, g, oh, ow, dxi);
            }
        });
    Some(dx)
}

// ---------------------------------------------------------------------------
// Batch normalization

#[derive(Debug, Clone)]
pub struct BnCache {
    pub x_hat: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Normalized with batch statistics (train) or running moments (eval).
    pub batch_stats: bool,
}

/// Per-channel batch mean and unbiased variance, for the running update.
#[derive(Debug, Clone)]
pub struct BnMoments {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

pub struct BnParams<'a> {
    pub gamma: &'a [f64],
    pub beta: &'a [f64],
    pub running_mean: &'a [f64],
    pub running_var: &'a [f64],
}

pub fn bn_forward(
    x: &Act,
    p: &BnParams<'_>,
    batch_stats: bool,
) -> (Act, BnCache, Option<BnMoments>) {
    let (n, c, hw) = (x.n, x.c, x.h * x.w);
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let mut moments = None;
    if batch_stats {
        for ch in 0..c {
            let mut s = 0.0;
            for i in 0..n {
                let base = (i * c + ch) * hw;
                s += x.data[base..base + hw].iter().sum::<f64>();
            }
            let m = s / count;
            let mut v = 0.0;
            for i in 0..n {
                let base = (i * c + ch) * hw;
                v += x.data[base..base + hw]
                    .iter()
                    .map(|&a| (a - m) * (a - m))
                    .sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = v / count;
        }
        let unbiased = if count > 1.0 {
            var.iter().map(|v| v * count / (count - 1.0)).collect()
        } else {
            var.clone()
        };
        moments = Some(BnMoments {
            mean: mean.clone(),
            var_unbiased: unbiased,
        });
    } else {
        mean.copy_from_slice(p.running_mean);
        var.copy_from_slice(p.running_var);
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut x_hat = vec![0.0; x.data.len()];
    let mut y = x.same_shape();
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            for j in base..base + hw {
                let xh = (x.data[j] - mean[ch]) * inv_std[ch];
                x_hat[j] = xh;
                y.data[j] = p.gamma[ch] * xh + p.beta[ch];
            }
        }
    }
    (
        y,
        BnCache {
            x_hat,
            inv_std,
            batch_stats,
        },
        moments,
    )
}

/// Returns the input gradient and accumulates into `dgamma`/`dbeta` when given.
pub fn bn_backward(
    dy: &Act,
    cache: &BnCache,
    gamma: &[f64],
    grads: Option<(&mut [f64], &mut [f64])>,
    need_dx: bool,
) -> Option<Act> {
    let (n, c, hw) = (dy.n, dy.c, dy.h * dy.w);
    let count = (n * hw) as f64;
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            for j in base..base + hw {
                sum_dy[ch] += dy.data[j];
                sum_dy_xhat[ch] += dy.data[j] * cache.x_hat[j];
            }
        }
    }
    if let Some((dgamma, dbeta)) = grads {
        for ch in 0..c {
            dgamma[ch] += sum_dy_xhat[ch];
            dbeta[ch] += sum_dy[ch];
        }
    }
    if !need_dx {
        return None;
    }
    let mut dx = dy.same_shape();
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            let scale = gamma[ch] * cache.inv_std[ch];
            if cache.batch_stats {
                let mean_dy = sum_dy[ch] / count;
                let mean_dy_xhat = sum_dy_xhat[ch] / count;
                for j in base..base + hw {
                    dx.data[j] = scale * (dy.data[j] - mean_dy - cache.x_hat[j] * mean_dy_xhat);
                }
            } else {
                for j in base..base + hw {
                    dx.data[j] = scale * dy.data[j];
                }
            }
        }
    }
    Some(dx)
}

// ---------------------------------------------------------------------------
// Elementwise and pooling

pub fn relu_forward(x: &Act) -> Act {
    let mut y = x.clone();
    for v in &mut y.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

/// Gradient through a ReLU given its output.
pub fn relu_backward(dy: &Act, y: &Act) -> Act {
    let mut dx = dy.clone();
    for (d, &o) in dx.data.iter_mut().zip(&y.data) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// 2x2 stride-2 max pooling; returns the flat input index of each maximum.
pub fn maxpool_forward(x: &Act) -> (Act, Vec<usize>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut y = Act::zeros(x.n, x.c, oh, ow);
    let mut arg = vec![0usize; y.data.len()];
    for plane in 0..x.n * x.c {
        let ib = plane * x.h * x.w;
        let ob = plane * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = ib + 2 * oy * x.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ib + (2 * oy + dy) * x.w + 2 * ox + dx;
                    if x.data[idx] > x.data[best] {
                        best = idx;
                    }
                }
                y.data[ob + oy * ow + ox] = x.data[best];
                arg[ob + oy * ow + ox] = best;
            }
        }
    }
    (y, arg)
}

pub fn maxpool_backward(dy: &Act, arg: &[usize], input_shape: (usize, usize, usize, usize)) -> Act {
    let (n, c, h, w) = input_shape;
    let mut dx = Act::zeros(n, c, h, w);
    for (g, &idx) in dy.data.iter().zip(arg) {
        dx.data[idx] += g;
    }
    dx
}

/// 2x2 stride-2 average pooling (odd trailing rows/columns are dropped).
pub fn avgpool_forward(x: &Act) -> Act {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut y = Act::zeros(x.n, x.c, oh, ow);
    for plane in 0..x.n * x.c {
        let ib = plane * x.h * x.w;
        let ob = plane * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let r0 = ib + 2 * oy * x.w + 2 * ox;
                let r1 = r0 + x.w;
                y.data[ob + oy * ow + ox] =
                    0.25 * (x.data[r0] + x.data[r0 + 1] + x.data[r1] + x.data[r1 + 1]);
            }
        }
    }
    y
}

pub fn avgpool_backward(dy: &Act, input_shape: (usize, usize, usize, usize)) -> Act {
    let (n, c, h, w) = input_shape;
    let mut dx = Act::zeros(n, c, h, w);
    let (oh, ow) = (dy.h, dy.w);
    for plane in 0..n * c {
        let ib = plane * h * w;
        let ob = plane * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = 0.25 * dy.data[ob + oy * ow + ox];
                let r0 = ib + 2 * oy * w + 2 * ox;
                let r1 = r0 + w;
                dx.data[r0] += g;
                dx.data[r0 + 1] += g;
                dx.data[r1] += g;
                dx.data[r1 + 1] += g;
            }
        }
    }
    dx
}

/// Channel-wise concatenation of activations sharing batch and spatial size.
pub fn concat(parts: &[&Act]) -> Act {
    let first = parts[0];
    let c: usize = parts.iter().map(|p| p.c).sum();
    let hw = first.h * first.w;
    let mut out = Act::zeros(first.n, c, first.h, first.w);
    for i in 0..first.n {
        let mut off = i * c * hw;
        for p in parts {
            let src = p.item(i);
            out.data[off..off + src.len()].copy_from_slice(src);
            off += src.len();
        }
    }
    out
}

/// Splits a channel-concatenated gradient back into pieces of the given widths.
pub fn split_channels(x: &Act, widths: &[usize]) -> Vec<Act> {
    let hw = x.h * x.w;
    let mut out: Vec<Act> = widths
        .iter()
        .map(|&c| Act::zeros(x.n, c, x.h, x.w))
        .collect();
    for i in 0..x.n {
        let mut off = i * x.c * hw;
        for (piece, &c) in out.iter_mut().zip(widths) {
            let len = c * hw;
            piece.data[i * len..(i + 1) * len].copy_from_slice(&x.data[off..off + len]);
            off += len;
        }
    }
    out
}

/// Global average pooling to an `[n, c]` matrix.
pub fn global_avg_pool(x: &Act) -> Vec<f64> {
    let hw = x.h * x.w;
    x.data
        .chunks_exact(hw)
        .map(|plane| plane.iter().sum::<f64>() / hw as f64)
        .collect()
}

pub fn global_avg_pool_backward(dpooled: &[f64], shape: (usize, usize, usize, usize)) -> Act {
    let (n, c, h, w) = shape;
    let hw = h * w;
    let mut dx = Act::zeros(n, c, h, w);
    for (plane, &g) in dx.data.chunks_exact_mut(hw).zip(dpooled) {
        plane.fill(g / hw as f64);
    }
    dx
}

/// y[n x out] = x[n x in] W^T + b, with `W` stored `[out, in]`.
pub fn linear_forward(x: &[f64], n: usize, weight: &[f64], bias: &[f64], out: usize) -> Vec<f64> {
    assert_eq!(bias.len(), out, "bias length");
    let inp = x.len() / n;
    let mut y = Vec::with_capacity(n * out);
    for _ in 0..n {
        y.extend_from_slice(bias);
    }
    gemm_nt(n, inp, out, x, weight, &mut y);
    y
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn linear_backward(
    x: &[f64],
    n: usize,
    weight: &[f64],
    dy: &[f64],
    out: usize,
    grads: Option<(&mut [f64], &mut [f64])>,
) -> Vec<f64> {
    let inp = x.len() / n;
    if let Some((dw, db)) = grads {
        gemm_tn(out, n, inp, dy, x, dw);
        for i in 0..n {
            for o in 0..out {
                db[o] += dy[i * out + o];
            }
        }
    }
    let mut dx = vec![0.0; n * inp];
    gemm_nn(n, out, inp, dy, weight, &mut dx);
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct convolution oracle.
    fn conv_naive(x: &Act, w: &[f64], g: &ConvGeom) -> Act {
        let (oh, ow) = (g.out_side(x.h), g.out_side(x.w));
        let mut y = Act::zeros(x.n, g.cout, oh, ow);
        for i in 0..x.n {
            for co in 0..g.cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for ci in 0..g.cin {
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy >= 0
                                        && ix >= 0
                                        && (iy as usize) < x.h
                                        && (ix as usize) < x.w
                                    {
                                        s += w[((co * g.cin + ci) * g.k + ky) * g.k + kx]
                                            * x.data[((i * x.c + ci) * x.h + iy as usize) * x.w
                                                + ix as usize];
                                    }
                                }
                            }
                        }
                        y.data[((i * g.cout + co) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        y
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        (0..n)
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for (g, side) in [
            (
                ConvGeom {
                    cin: 2,
                    cout: 3,
                    k: 7,
                    stride: 2,
                    pad: 3,
                },
                9,
            ),
            (
                ConvGeom {
                    cin: 3,
                    cout: 2,
                    k: 3,
                    stride: 1,
                    pad: 1,
                },
                5,
            ),
            (
                ConvGeom {
                    cin: 4,
                    cout: 5,
                    k: 1,
                    stride: 1,
                    pad: 0,
                },
                3,
            ),
        ] {
            let x = Act {
                n: 2,
                c: g.cin,
                h: side,
                w: side,
                data: pseudo(2 * g.cin * side * side, 1),
            };
            let w = pseudo(g.cout * g.cin * g.k * g.k, 2);
            let fast = conv_forward(&x, &w, &g);
            let slow = conv_naive(&x, &w, &g);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), dy> must equal <x, dx> and <w, dw> for a linear operator.
        let g = ConvGeom {
            cin: 2,
            cout: 3,
            k: 3,
            stride: 2,
            pad: 1,
        };
        let x = Act {
            n: 2,
            c: 2,
            h: 6,
            w: 6,
            data: pseudo(144, 3),
        };
        let w = pseudo(54, 4);
        let y = conv_forward(&x, &w, &g);
        let dy = Act {
            data: pseudo(y.data.len(), 5),
            ..y.clone()
        };
        let mut dw = vec![0.0; w.len()];
        let dx = conv_backward(&x, &w, &g, &dy, Some(&mut dw), true).unwrap();
        let lhs: f64 = y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
        let via_x: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        let via_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
    }

    #[test]
    fn pools() {
        let x = Act {
            n: 1,
            c: 1,
            h: 2,
            w: 3,
            data: vec![1.0, 5.0, 9.0, 3.0, 2.0, 9.0],
        };
        let (y, arg) = maxpool_forward(&x);
        assert_eq!(y.data, vec![5.0]);
        assert_eq!(arg, vec![1]);
        assert_eq!(avgpool_forward(&x).data, vec![2.75]);
    }

    #[test]
    fn concat_split_inverse() {
        let a = Act {
            n: 2,
            c: 1,
            h: 1,
            w: 2,
            data: vec![1.0, 2.0, 3.0, 4.0],
        };
        let b = Act {
            n: 2,
            c: 2,
            h: 1,
            w: 2,
            data: vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0],
        };
        let c = concat(&[&a, &b]);
        assert_eq!(
            c.data,
            vec![1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
        let parts = split_channels(&c, &[1, 2]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let x = Act {
            n: 2,
            c: 1,
            h: 1,
            w: 2,
            data: vec![1.0, 2.0, 3.0, 4.0],
        };
        let p = BnParams {
            gamma: &[1.0],
            beta: &[0.0],
            running_mean: &[0.0],
            running_var: &[1.0],
        };
        let (y, _, m) = bn_forward(&x, &p, true);
        let mean: f64 = y.data.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        let m = m.unwrap();
        assert_eq!(m.mean, vec![2.5]);
        assert!((m.var_unbiased[0] - 5.0 / 3.0).abs() < 1e-12);
    }
}
