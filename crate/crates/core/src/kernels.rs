//! Convolution, pooling and normalization kernels (forward and backward).
//!
//! Convolutions go through a batched im2col layout `[C*K*K, N*OH*OW]` so a
//! whole mini-batch becomes one matrix product.

use crate::parallel;
use crate::tensor::{gemm, Mat, Real};

/// Geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    /// Output extent of a convolution, `None` when the kernel does not fit.
    pub fn conv_out(&self, size: usize) -> Option<usize> {
        let padded = size + 2 * self.pad;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of a transposed convolution.
    pub fn deconv_out(&self, size: usize, output_pad: usize) -> Option<usize> {
        ((size.max(1) - 1) * self.stride + self.kernel + output_pad).checked_sub(2 * self.pad)
    }
}

/// Unfolds `x` (`[n, c, h, w]`) into `[c*k*k, n*oh*ow]` columns.
#[allow(clippy::too_many_arguments)]
pub fn im2col<F: Real>(
    x: &[F],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    g: Geometry,
    oh: usize,
    ow: usize,
) -> Vec<F> {
    let k = g.kernel;
    let p = oh * ow;
    let cols_w = n * p;
    let mut cols = vec![F::zero(); c * k * k * cols_w];
    parallel::for_each_chunk_mut(&mut cols, k * k * cols_w, |ch, block| {
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut block[(ki * k + kj) * cols_w..(ki * k + kj + 1) * cols_w];
                for s in 0..n {
                    let plane = &x[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        let dst = &mut row[s * p + oy * ow..s * p + (oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    cols
}

/// Folds columns back into `[n, c, h, w]`, summing overlapping taps.
#[allow(clippy::too_many_arguments)]
pub fn col2im<F: Real>(
    cols: &[F],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    g: Geometry,
    oh: usize,
    ow: usize,
) -> Vec<F> {
    let k = g.kernel;
    let p = oh * ow;
    let cols_w = n * p;
    let mut x = vec![F::zero(); n * c * h * w];
    parallel::for_each_chunk_mut(&mut x, h * w, |plane_idx, plane| {
        let (s, ch) = (plane_idx / c, plane_idx % c);
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[(ch * k * k + ki * k + kj) * cols_w..][..cols_w];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &row[s * p + oy * ow..s * p + (oy + 1) * ow];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    });
    x
}

/// `[n, c, p]` -> `[c, n*p]`
pub fn nc_to_cn<F: Real>(x: &[F], n: usize, c: usize, p: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for s in 0..n {
        for ch in 0..c {
            out[ch * n * p + s * p..ch * n * p + (s + 1) * p]
                .copy_from_slice(&x[(s * c + ch) * p..(s * c + ch + 1) * p]);
        }
    }
    out
}

/// `[c, n*p]` -> `[n, c, p]`
pub fn cn_to_nc<F: Real>(x: &[F], n: usize, c: usize, p: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for s in 0..n {
        for ch in 0..c {
            out[(s * c + ch) * p..(s * c + ch + 1) * p]
                .copy_from_slice(&x[ch * n * p + s * p..ch * n * p + (s + 1) * p]);
        }
    }
    out
}

fn add_channel_bias<F: Real>(y: &mut [F], bias: &[F], n: usize, c: usize, p: usize) {
    for s in 0..n {
        for ch in 0..c {
            let b = bias[ch];
            y[(s * c + ch) * p..(s * c + ch + 1) * p].iter_mut().for_each(|v| *v += b);
        }
    }
}

/// Sums `[n, c, p]` over `n` and `p`.
pub fn channel_sums<F: Real>(dy: &[F], n: usize, c: usize, p: usize) -> Vec<F> {
    let mut out = vec![F::zero(); c];
    for s in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += dy[(s * c + ch) * p..(s * c + ch + 1) * p].iter().copied().sum::<F>();
        }
    }
    out
}

/// Shape bundle for a 2-d (transposed) convolution call.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub oh: usize,
    pub ow: usize,
    pub g: Geometry,
}

/// Convolution. `weight` is `[c_out, c_in, k, k]`.
pub fn conv2d<F: Real>(x: &[F], weight: &[F], bias: Option<&[F]>, d: ConvDims) -> Vec<F> {
    let kk = d.g.kernel * d.g.kernel;
    let p = d.oh * d.ow;
    let cols = im2col(x, d.n, d.c_in, d.h, d.w, d.g, d.oh, d.ow);
    let mut y = vec![F::zero(); d.c_out * d.n * p];
    gemm(Mat::new(weight, d.c_out, d.c_in * kk), Mat::new(&cols, d.c_in * kk, d.n * p), F::zero(), &mut y);
    let mut y = cn_to_nc(&y, d.n, d.c_out, p);
    if let Some(b) = bias {
        add_channel_bias(&mut y, b, d.n, d.c_out, p);
    }
    y
}

/// Gradients of [`conv2d`]: `(dx, dweight, dbias)`; `dx` only when requested.
pub fn conv2d_backward<F: Real>(
    x: &[F],
    weight: &[F],
    dy: &[F],
    d: ConvDims,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<F>>, Option<Vec<F>>, Vec<F>) {
    let kk = d.g.kernel * d.g.kernel;
    let p = d.oh * d.ow;
    let dy_cn = nc_to_cn(dy, d.n, d.c_out, p);
    let db = channel_sums(dy, d.n, d.c_out, p);
    let dw = need_dw.then(|| {
        let cols = im2col(x, d.n, d.c_in, d.h, d.w, d.g, d.oh, d.ow);
        let mut dw = vec![F::zero(); d.c_out * d.c_in * kk];
        gemm(Mat::new(&dy_cn, d.c_out, d.n * p), Mat::t(&cols, d.c_in * kk, d.n * p), F::zero(), &mut dw);
        dw
    });
    let dx = need_dx.then(|| {
        let mut dcols = vec![F::zero(); d.c_in * kk * d.n * p];
        gemm(Mat::t(weight, d.c_out, d.c_in * kk), Mat::new(&dy_cn, d.c_out, d.n * p), F::zero(), &mut dcols);
        col2im(&dcols, d.n, d.c_in, d.h, d.w, d.g, d.oh, d.ow)
    });
    (dx, dw, db)
}

/// Transposed convolution. `weight` is `[c_in, c_out, k, k]`; the output
/// extent `oh x ow` must satisfy `conv_out(oh) == h`.
pub fn conv_t2d<F: Real>(x: &[F], weight: &[F], bias: Option<&[F]>, d: ConvDims) -> Vec<F> {
    let kk = d.g.kernel * d.g.kernel;
    let hw = d.h * d.w;
    let x_cn = nc_to_cn(x, d.n, d.c_in, hw);
    let mut cols = vec![F::zero(); d.c_out * kk * d.n * hw];
    gemm(Mat::t(weight, d.c_in, d.c_out * kk), Mat::new(&x_cn, d.c_in, d.n * hw), F::zero(), &mut cols);
    let mut y = col2im(&cols, d.n, d.c_out, d.oh, d.ow, d.g, d.h, d.w);
    if let Some(b) = bias {
        add_channel_bias(&mut y, b, d.n, d.c_out, d.oh * d.ow);
    }
    y
}

/// Gradients of [`conv_t2d`].
pub fn conv_t2d_backward<F: Real>(
    x: &[F],
    weight: &[F],
    dy: &[F],
    d: ConvDims,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<F>>, Option<Vec<F>>, Vec<F>) {
    let kk = d.g.kernel * d.g.kernel;
    let hw = d.h * d.w;
    let db = channel_sums(dy, d.n, d.c_out, d.oh * d.ow);
    let dcols = im2col(dy, d.n, d.c_out, d.oh, d.ow, d.g, d.h, d.w);
    let dw = need_dw.then(|| {
        let x_cn = nc_to_cn(x, d.n, d.c_in, hw);
        let mut dw = vec![F::zero(); d.c_in * d.c_out * kk];
        gemm(Mat::new(&x_cn, d.c_in, d.n * hw), Mat::t(&dcols, d.c_out * kk, d.n * hw), F::zero(), &mut dw);
        dw
    });
    let dx = need_dx.then(|| {
        let mut dx_cn = vec![F::zero(); d.c_in * d.n * hw];
        gemm(Mat::new(weight, d.c_in, d.c_out * kk), Mat::new(&dcols, d.c_out * kk, d.n * hw), F::zero(), &mut dx_cn);
        cn_to_nc(&dx_cn, d.n, d.c_in, hw)
    });
    (dx, dw, db)
}

/// Max pooling over `[n, c, h, w]`; returns values and flat argmax indices.
pub fn max_pool<F: Real>(
    x: &[F],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
) -> (Vec<F>, Vec<usize>, usize, usize) {
    let oh = (h - k) / s + 1;
    let ow = (w - k) / s + 1;
    let mut out = vec![F::zero(); n * c * oh * ow];
    let mut arg = vec![0usize; out.len()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = F::neg_infinity();
                let mut bi = base;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * s + ky) * w + ox * s + kx;
                        if x[idx] > best {
                            best = x[idx];
                            bi = idx;
                        }
                    }
                }
                let o = plane * oh * ow + oy * ow + ox;
                out[o] = best;
                arg[o] = bi;
            }
        }
    }
    (out, arg, oh, ow)
}

/// Training-mode batch normalization statistics for `[n, c, p]`.
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
    pub inv_std: Vec<F>,
    pub xhat: Vec<F>,
}

pub fn batch_norm_train<F: Real>(x: &[F], n: usize, c: usize, p: usize, eps: F) -> BatchStats<F> {
    let m = F::of((n * p) as f64);
    let mut mean = vec![F::zero(); c];
    let mut var = vec![F::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            mean[ch] += x[(s * c + ch) * p..(s * c + ch + 1) * p].iter().copied().sum::<F>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for s in 0..n {
        for ch in 0..c {
            let mu = mean[ch];
            var[ch] += x[(s * c + ch) * p..(s * c + ch + 1) * p]
                .iter()
                .map(|&v| (v - mu) * (v - mu))
                .sum::<F>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![F::zero(); x.len()];
    for s in 0..n {
        for ch in 0..c {
            let r = (s * c + ch) * p..(s * c + ch + 1) * p;
            for (o, &v) in xhat[r.clone()].iter_mut().zip(&x[r]) {
                *o = (v - mean[ch]) * inv_std[ch];
            }
        }
    }
    BatchStats { mean, var, inv_std, xhat }
}

/// Backward of training-mode batch norm: returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_train_backward<F: Real>(
    dy: &[F],
    xhat: &[F],
    inv_std: &[F],
    gamma: &[F],
    n: usize,
    c: usize,
    p: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let m = F::of((n * p) as f64);
    let mut dgamma = vec![F::zero(); c];
    let mut dbeta = vec![F::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            let r = (s * c + ch) * p..(s * c + ch + 1) * p;
            for (&g, &xh) in dy[r.clone()].iter().zip(&xhat[r]) {
                dgamma[ch] += g * xh;
                dbeta[ch] += g;
            }
        }
    }
    let mut dx = vec![F::zero(); dy.len()];
    for s in 0..n {
        for ch in 0..c {
            let r = (s * c + ch) * p..(s * c + ch + 1) * p;
            let k = gamma[ch] * inv_std[ch] / m;
            for ((o, &g), &xh) in dx[r.clone()].iter_mut().zip(&dy[r.clone()]).zip(&xhat[r]) {
                *o = k * (m * g - dbeta[ch] - xh * dgamma[ch]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], wt: &[f64], d: ConvDims) -> Vec<f64> {
        let k = d.g.kernel;
        let mut y = vec![0.0; d.n * d.c_out * d.oh * d.ow];
        for s in 0..d.n {
            for o in 0..d.c_out {
                for oy in 0..d.oh {
                    for ox in 0..d.ow {
                        let mut acc = 0.0;
                        for ci in 0..d.c_in {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * d.g.stride + ky) as isize - d.g.pad as isize;
                                    let ix = (ox * d.g.stride + kx) as isize - d.g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                        continue;
                                    }
                                    acc += x[((s * d.c_in + ci) * d.h + iy as usize) * d.w + ix as usize]
                                        * wt[((o * d.c_in + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        y[((s * d.c_out + o) * d.oh + oy) * d.ow + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn naive_deconv(x: &[f64], wt: &[f64], d: ConvDims) -> Vec<f64> {
        // scatter form: every input pixel stamps its kernel onto the output
        let k = d.g.kernel;
        let mut y = vec![0.0; d.n * d.c_out * d.oh * d.ow];
        for s in 0..d.n {
            for ci in 0..d.c_in {
                for iy in 0..d.h {
                    for ix in 0..d.w {
                        let v = x[((s * d.c_in + ci) * d.h + iy) * d.w + ix];
                        for o in 0..d.c_out {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let oy = (iy * d.g.stride + ky) as isize - d.g.pad as isize;
                                    let ox = (ix * d.g.stride + kx) as isize - d.g.pad as isize;
                                    if oy < 0 || ox < 0 || oy >= d.oh as isize || ox >= d.ow as isize {
                                        continue;
                                    }
                                    y[((s * d.c_out + o) * d.oh + oy as usize) * d.ow + ox as usize] +=
                                        v * wt[((ci * d.c_out + o) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    fn seq(n: usize, a: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64) * a).sin()).collect()
    }

    #[test]
    fn conv_matches_direct_loop() {
        let g = Geometry { kernel: 3, stride: 2, pad: 1 };
        let d = ConvDims { n: 2, c_in: 3, h: 7, w: 6, c_out: 4, oh: g.conv_out(7).unwrap(), ow: g.conv_out(6).unwrap(), g };
        let x = seq(2 * 3 * 7 * 6, 0.3);
        let wt = seq(4 * 3 * 9, 0.7);
        let got = conv2d(&x, &wt, None, d);
        let want = naive_conv(&x, &wt, d);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn deconv_matches_scatter_loop() {
        let g = Geometry { kernel: 3, stride: 2, pad: 1 };
        let (h, w) = (4, 3);
        let oh = g.deconv_out(h, 1).unwrap();
        let ow = g.deconv_out(w, 1).unwrap();
        assert_eq!((oh, ow), (8, 6));
        let d = ConvDims { n: 2, c_in: 3, h, w, c_out: 2, oh, ow, g };
        let x = seq(2 * 3 * h * w, 0.41);
        let wt = seq(3 * 2 * 9, 0.23);
        let got = conv_t2d(&x, &wt, None, d);
        let want = naive_deconv(&x, &wt, d);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), dy> == <x, dx> for the linear map x -> conv(x)
        let g = Geometry { kernel: 5, stride: 2, pad: 2 };
        let d = ConvDims { n: 2, c_in: 2, h: 9, w: 9, c_out: 3, oh: g.conv_out(9).unwrap(), ow: g.conv_out(9).unwrap(), g };
        let x = seq(2 * 2 * 81, 0.13);
        let wt = seq(3 * 2 * 25, 0.29);
        let y = conv2d(&x, &wt, None, d);
        let dy = seq(y.len(), 0.17);
        let (dx, dw, _) = conv2d_backward(&x, &wt, &dy, d, true, true);
        let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(dx.unwrap().iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
        let rhs_w: f64 = wt.iter().zip(dw.unwrap().iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-9);
    }

    #[test]
    fn max_pool_picks_maximum() {
        let x: Vec<f64> = vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0];
        let (out, arg, oh, ow) = max_pool(&x, 1, 1, 4, 4, 2, 2);
        assert_eq!((oh, ow), (2, 2));
        assert_eq!(out, vec![5.0, 9.0, 1.0, 2.0]);
        assert_eq!(arg, vec![1, 6, 12, 15]);
    }
}
