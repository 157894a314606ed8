//! Forward and backward kernels on raw NCHW buffers.

use rayon::prelude::*;

use crate::tensor::{matmul, Float, Shape, Tensor};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, pad: usize, stride: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(Self {
            c,
            h,
            w,
            k,
            pad,
            stride,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn cols_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols_len(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1x1 stride-1 convolution reads its input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0 && self.stride == 1
    }

    /// Output columns `[lo, hi)` whose source column `ow * stride + kj - pad` is in range.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let mut lo = 0;
        while lo < self.wo && (lo * self.stride + kj) < self.pad {
            lo += 1;
        }
        let mut hi = lo;
        while hi < self.wo && hi * self.stride + kj < self.pad + self.w {
            hi += 1;
        }
        (lo, hi)
    }
}

pub(crate) fn im2col<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.cols_len();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * p;
                let (lo, hi) = g.valid_cols(kj);
                for oh in 0..g.ho {
                    let dst = &mut cols[row + oh * g.wo..row + (oh + 1) * g.wo];
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if g.stride == 1 {
                        let s0 = lo + kj - g.pad;
                        dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    } else {
                        for (ow, d) in dst.iter_mut().enumerate().take(hi).skip(lo) {
                            *d = src[ow * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im<T: Float>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.cols_len();
    dx.fill(T::zero());
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * p;
                let (lo, hi) = g.valid_cols(kj);
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oh * g.wo..row + (oh + 1) * g.wo];
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in lo..hi {
                        dst[ow * g.stride + kj - g.pad] += src[ow];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Float>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, g: &ConvGeom) -> Tensor<T> {
    let n = x.shape().n();
    let cout = w.shape().n();
    let p = g.cols_len();
    let ckk = g.cols_rows();
    let mut out = Tensor::zeros(Shape::new(n, cout, g.ho, g.wo));
    let wd = w.data();
    out.data_mut().par_chunks_mut(cout * p).enumerate().for_each(|(i, o)| {
        let xs = x.sample(i);
        let mut buf;
        let cols: &[T] = if g.is_pointwise() {
            xs
        } else {
            buf = vec![T::zero(); ckk * p];
            im2col(xs, g, &mut buf);
            &buf
        };
        if let Some(b) = b {
            for (co, chunk) in o.chunks_mut(p).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        matmul(cout, ckk, p, wd, false, cols, false, T::one(), o);
    });
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    g: &ConvGeom,
    want: [bool; 3],
) -> ConvGrads<T> {
    let n = x.shape().n();
    let cout = w.shape().n();
    let p = g.cols_len();
    let ckk = g.cols_rows();
    let [want_dx, want_dw, want_db] = want;

    let dw = want_dw.then(|| {
        // Accumulated sample by sample so the reduction order is fixed.
        let mut dw = Tensor::zeros(w.shape());
        let mut buf = vec![T::zero(); if g.is_pointwise() { 0 } else { ckk * p }];
        for i in 0..n {
            let cols: &[T] = if g.is_pointwise() {
                x.sample(i)
            } else {
                im2col(x.sample(i), g, &mut buf);
                &buf
            };
            matmul(cout, p, ckk, dy.sample(i), false, cols, true, T::one(), dw.data_mut());
        }
        dw
    });

    let db = want_db.then(|| {
        let mut db = vec![0.0f64; cout];
        for i in 0..n {
            for (co, chunk) in dy.sample(i).chunks(p).enumerate() {
                db[co] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
        Tensor::new(
            Shape::new(1, cout, 1, 1),
            db.into_iter().map(T::from_f64_lossy).collect(),
        )
        .expect("bias shape")
    });

    let dx = want_dx.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        let wd = w.data();
        dx.data_mut()
            .par_chunks_mut(g.c * g.h * g.w)
            .enumerate()
            .for_each(|(i, d)| {
                if g.is_pointwise() {
                    matmul(ckk, cout, p, wd, true, dy.sample(i), false, T::zero(), d);
                } else {
                    let mut cols = vec![T::zero(); ckk * p];
                    matmul(ckk, cout, p, wd, true, dy.sample(i), false, T::zero(), &mut cols);
                    col2im(&cols, g, d);
                }
            });
        dx
    });

    ConvGrads { dx, dw, db }
}

/// Per-channel `(mean, biased variance)` over N, H and W, accumulated in f64.
pub(crate) fn channel_moments<T: Float>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let (c, plane) = (s.c(), s.plane());
    let m = (s.n() * plane) as f64;
    let mut mean = vec![0.0; c];
    for i in 0..s.n() {
        for (ch, chunk) in x.sample(i).chunks(plane).enumerate() {
            mean[ch] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0; c];
    for i in 0..s.n() {
        for (ch, chunk) in x.sample(i).chunks(plane).enumerate() {
            var[ch] += chunk
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean[ch];
                    d * d
                })
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

/// `y = gamma * (x - mean) * inv_std + beta` per channel.
pub(crate) fn bn_apply<T: Float>(x: &Tensor<T>, gamma: &[T], beta: &[T], mean: &[f64], inv_std: &[f64]) -> Tensor<T> {
    let s = x.shape();
    let plane = s.plane();
    let mut out = Tensor::zeros(s);
    for (k, (o, xi)) in out.data_mut().chunks_mut(plane).zip(x.data().chunks(plane)).enumerate() {
        let ch = k % s.c();
        let scale = gamma[ch].as_f64() * inv_std[ch];
        let shift = beta[ch].as_f64() - mean[ch] * scale;
        let (scale, shift) = (T::from_f64_lossy(scale), T::from_f64_lossy(shift));
        for (a, &b) in o.iter_mut().zip(xi) {
            *a = b * scale + shift;
        }
    }
    out
}

pub(crate) struct BnGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

pub(crate) fn bn_backward<T: Float>(
    x: &Tensor<T>,
    gamma: &[T],
    dy: &Tensor<T>,
    mean: &[f64],
    inv_std: &[f64],
    batch_stats: bool,
) -> BnGrads<T> {
    let s = x.shape();
    let (c, plane) = (s.c(), s.plane());
    let m = (s.n() * plane) as f64;
    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xhat = vec![0.0f64; c];
    for (k, (xi, di)) in x.data().chunks(plane).zip(dy.data().chunks(plane)).enumerate() {
        let ch = k % c;
        for (&xv, &dv) in xi.iter().zip(di) {
            let xhat = (xv.as_f64() - mean[ch]) * inv_std[ch];
            sum_dy[ch] += dv.as_f64();
            sum_dy_xhat[ch] += dv.as_f64() * xhat;
        }
    }
    let mut dx = Tensor::zeros(s);
    for (k, ((o, xi), di)) in dx
        .data_mut()
        .chunks_mut(plane)
        .zip(x.data().chunks(plane))
        .zip(dy.data().chunks(plane))
        .enumerate()
    {
        let ch = k % c;
        let g = gamma[ch].as_f64() * inv_std[ch];
        for ((o, &xv), &dv) in o.iter_mut().zip(xi).zip(di) {
            let v = if batch_stats {
                let xhat = (xv.as_f64() - mean[ch]) * inv_std[ch];
                g * (dv.as_f64() - sum_dy[ch] / m - xhat * sum_dy_xhat[ch] / m)
            } else {
                g * dv.as_f64()
            };
            *o = T::from_f64_lossy(v);
        }
    }
    BnGrads {
        dx,
        dgamma: sum_dy_xhat.into_iter().map(T::from_f64_lossy).collect(),
        dbeta: sum_dy.into_iter().map(T::from_f64_lossy).collect(),
    }
}

/// 2x2 stride-2 max pool. Returns the output and, per output element, the flat
/// input index of the first maximum in row-major window order.
pub(crate) fn maxpool2x<T: Float>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let s = x.shape();
    let (h, w) = (s.h(), s.w());
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(Shape::new(s.n(), s.c(), ho, wo));
    let mut arg = vec![0u32; out.len()];
    let xd = x.data();
    for plane in 0..s.n() * s.c() {
        let base = plane * h * w;
        for r in 0..ho {
            for c in 0..wo {
                let mut best = base + 2 * r * w + 2 * c;
                for idx in [
                    base + 2 * r * w + 2 * c + 1,
                    base + (2 * r + 1) * w + 2 * c,
                    base + (2 * r + 1) * w + 2 * c + 1,
                ] {
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                let o = (plane * ho + r) * wo + c;
                out.data_mut()[o] = xd[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg)
}

/// Source taps for each output coordinate of a 2x bilinear upsample
/// (half-pixel centers, edge clamped).
pub(crate) fn upsample_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub(crate) fn upsample2x<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (h, w) = (s.h(), s.w());
    let ty = upsample_taps(h);
    let tx: Vec<_> = upsample_taps(w)
        .into_iter()
        .map(|(a, b, wa, wb)| (a, b, T::from_f64_lossy(wa), T::from_f64_lossy(wb)))
        .collect();
    let mut out = Tensor::zeros(Shape::new(s.n(), s.c(), 2 * h, 2 * w));
    for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(4 * h * w)) {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64_lossy(wy0), T::from_f64_lossy(wy1));
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                dst[oy * 2 * w + ox] = wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Float>(dy: &Tensor<T>, in_shape: Shape) -> Tensor<T> {
    let (h, w) = (in_shape.h(), in_shape.w());
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let mut dx = Tensor::zeros(in_shape);
    for (d, g) in dx.data_mut().chunks_mut(h * w).zip(dy.data().chunks(4 * h * w)) {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = g[oy * 2 * w + ox];
                let f = |a: f64, b: f64| T::from_f64_lossy(a * b);
                d[y0 * w + x0] += f(wy0, wx0) * v;
                d[y0 * w + x1] += f(wy0, wx1) * v;
                d[y1 * w + x0] += f(wy1, wx0) * v;
                d[y1 * w + x1] += f(wy1, wx1) * v;
            }
        }
    }
    dx
}

pub(crate) fn sigmoid<T: Float>(v: T) -> T {
    // Kept strictly inside (0, 1) so downstream logs stay finite.
    let y = T::one() / (T::one() + (-v).exp());
    let eps = T::epsilon();
    y.max(eps).min(T::one() - eps)
}
