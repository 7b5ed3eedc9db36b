//! Raw loops behind the convolution, pooling, resampling and normalization ops.

use crate::tensor::gemm;
use crate::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
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

impl ConvGeom {
    pub fn new(x: &[usize], wt: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(x.len(), 4, "conv2d input must be NCHW, got {x:?}");
        assert_eq!(wt.len(), 4, "conv2d weight must be OIHW, got {wt:?}");
        assert_eq!(x[1], wt[1], "conv2d channel mismatch: input {x:?}, weight {wt:?}");
        assert!(stride > 0);
        let (h, w, kh, kw) = (x[2], x[3], wt[2], wt[3]);
        assert!(
            h + 2 * pad >= kh && w + 2 * pad >= kw,
            "conv2d kernel {kh}x{kw} larger than padded input {h}x{w}"
        );
        Self {
            n: x[0],
            c: x[1],
            h,
            w,
            o: wt[0],
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        }
    }

    pub fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn ohw(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose input column `ox*stride + kj - pad` is in bounds.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kj as isize - self.pad as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = ((self.w as isize - off) + s - 1) / s;
        let hi = hi.clamp(0, self.ow as isize);
        (lo.min(hi) as usize, hi as usize)
    }
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ohw = g.ohw();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                let (lo, hi) = g.valid_cols(kj);
                for oy in 0..g.oh {
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    let base = kj as isize - g.pad as isize;
                    if g.stride == 1 {
                        let s0 = (lo as isize + base) as usize;
                        out[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            out[ox] = src[(ox as isize * g.stride as isize + base) as usize];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ohw = g.ohw();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                let (lo, hi) = g.valid_cols(kj);
                let base = kj as isize - g.pad as isize;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.ow..(oy + 1) * g.ow];
                    for ox in lo..hi {
                        dst[(ox as isize * g.stride as isize + base) as usize] += s[ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Float>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (ckk, ohw) = (g.ckk(), g.ohw());
    let mut out = vec![T::zero(); g.n * g.o * ohw];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); ckk * ohw]
    };
    let in_stride = g.c * g.h * g.w;
    for n in 0..g.n {
        let xn = &x[n * in_stride..(n + 1) * in_stride];
        let b: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        let dst = &mut out[n * g.o * ohw..(n + 1) * g.o * ohw];
        gemm(
            g.o,
            ckk,
            ohw,
            T::one(),
            (w, ckk as isize, 1),
            (b, ohw as isize, 1),
            T::zero(),
            (dst, ohw as isize, 1),
        );
    }
    out
}

/// Returns `(dx, dw)`; either is skipped when not requested.
pub(crate) fn conv2d_backward<T: Float>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (ckk, ohw) = (g.ckk(), g.ohw());
    let in_stride = g.c * g.h * g.w;
    let mut dx = want_dx.then(|| vec![T::zero(); g.n * in_stride]);
    let mut dw = want_dw.then(|| vec![T::zero(); g.o * ckk]);
    let mut cols = vec![T::zero(); ckk * ohw];
    for n in 0..g.n {
        let dyn_ = &dy[n * g.o * ohw..(n + 1) * g.o * ohw];
        if let Some(dw) = dw.as_mut() {
            let xn = &x[n * in_stride..(n + 1) * in_stride];
            let b: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(xn, g, &mut cols);
                &cols
            };
            // dw[O, CKK] += dy_n[O, OHW] @ cols^T[OHW, CKK]
            gemm(
                g.o,
                ohw,
                ckk,
                T::one(),
                (dyn_, ohw as isize, 1),
                (b, 1, ohw as isize),
                T::one(),
                (dw.as_mut_slice(), ckk as isize, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_stride..(n + 1) * in_stride];
            if g.is_pointwise() {
                gemm(
                    ckk,
                    g.o,
                    ohw,
                    T::one(),
                    (w, 1, ckk as isize),
                    (dyn_, ohw as isize, 1),
                    T::zero(),
                    (dxn, ohw as isize, 1),
                );
            } else {
                // dcols[CKK, OHW] = w^T[CKK, O] @ dy_n[O, OHW]
                gemm(
                    ckk,
                    g.o,
                    ohw,
                    T::one(),
                    (w, 1, ckk as isize),
                    (dyn_, ohw as isize, 1),
                    T::zero(),
                    (cols.as_mut_slice(), ohw as isize, 1),
                );
                col2im(&cols, g, dxn);
            }
        }
    }
    (dx, dw)
}

/// Non-overlapping `k`x`k` max pooling over NCHW planes; returns values and argmax offsets.
pub(crate) fn max_pool_forward<T: Float>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = oy * k * w + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = (oy * k + dy) * w + ox * k + dx;
                        if plane[idx] > plane[best] {
                            best = idx;
                        }
                    }
                }
                out.push(plane[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

/// Source taps for one axis of an align-corners=false bilinear resize.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub(crate) fn resize_forward<T: Float>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            let fy = T::of(fy);
            for &(x0, x1, fx) in &tx {
                let fx = T::of(fx);
                let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    out
}

pub(crate) fn resize_backward<T: Float>(
    dy: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let plane = &mut dx[p * h * w..(p + 1) * h * w];
        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let v = g[oy * ow + ox];
                plane[y0 * w + x0] += v * (T::one() - fy) * (T::one() - fx);
                plane[y0 * w + x1] += v * (T::one() - fy) * fx;
                plane[y1 * w + x0] += v * fy * (T::one() - fx);
                plane[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    dx
}

/// Normalizes each of `groups` contiguous chunks; returns normalized values and per-chunk 1/std.
pub(crate) fn group_norm_forward<T: Float>(x: &[T], groups: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let m = x.len() / groups;
    let mut out = Vec::with_capacity(x.len());
    let mut inv = Vec::with_capacity(groups);
    let denom = T::of(m as f64);
    for chunk in x.chunks(m) {
        let mean = chunk.iter().copied().sum::<T>() / denom;
        let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / denom;
        let is = T::one() / (var + eps).sqrt();
        out.extend(chunk.iter().map(|&v| (v - mean) * is));
        inv.push(is);
    }
    (out, inv)
}

pub(crate) fn group_norm_backward<T: Float>(dy: &[T], xhat: &[T], inv: &[T]) -> Vec<T> {
    let m = dy.len() / inv.len();
    let denom = T::of(m as f64);
    let mut dx = Vec::with_capacity(dy.len());
    for ((g, xh), &is) in dy.chunks(m).zip(xhat.chunks(m)).zip(inv) {
        let mean_g = g.iter().copied().sum::<T>() / denom;
        let mean_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / denom;
        dx.extend(g.iter().zip(xh).map(|(&a, &b)| is * (a - mean_g - b * mean_gx)));
    }
    dx
}
