//! Forward and backward kernels on raw slices.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

/// `c = alpha * a·b + beta * c` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
/// Transposition is expressed through the strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the callers pass slices sized for the given dimensions and
    // strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvShape {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvShape {
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || k == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(ConvShape {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

pub(crate) fn im2col(x: &[f64], s: &ConvShape, col: &mut [f64]) {
    let p = s.col_cols();
    for c in 0..s.c_in {
        let plane = &x[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ki in 0..s.k {
            for kj in 0..s.k {
                let row = (c * s.k + ki) * s.k + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oh in 0..s.h_out {
                    let ih = (oh * s.stride + ki) as isize - s.pad as isize;
                    let out_row = &mut dst[oh * s.w_out..(oh + 1) * s.w_out];
                    if ih < 0 || ih >= s.h as isize {
                        out_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * s.w..(ih as usize + 1) * s.w];
                    for (ow, v) in out_row.iter_mut().enumerate() {
                        let iw = (ow * s.stride + kj) as isize - s.pad as isize;
                        *v = if iw < 0 || iw >= s.w as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im(col: &[f64], s: &ConvShape, dx: &mut [f64]) {
    let p = s.col_cols();
    for c in 0..s.c_in {
        let plane = &mut dx[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ki in 0..s.k {
            for kj in 0..s.k {
                let row = (c * s.k + ki) * s.k + kj;
                let src = &col[row * p..(row + 1) * p];
                for oh in 0..s.h_out {
                    let ih = (oh * s.stride + ki) as isize - s.pad as isize;
                    if ih < 0 || ih >= s.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * s.w..(ih as usize + 1) * s.w];
                    for ow in 0..s.w_out {
                        let iw = (ow * s.stride + kj) as isize - s.pad as isize;
                        if iw >= 0 && iw < s.w as isize {
                            dst[iw as usize] += src[oh * s.w_out + ow];
                        }
                    }
                }
            }
        }
    }
}

/// 2×2, stride-2 max pooling of `planes` planes of size `h×w`. Ties go to the
/// first maximizer in row-major order. Returns the flat argmax per output.
pub(crate) fn maxpool2(x: &[f64], planes: usize, h: usize, w: usize, out: &mut [f64]) -> Vec<u32> {
    let (ho, wo) = (h / 2, w / 2);
    let mut argmax = vec![0u32; planes * ho * wo];
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + (2 * i) * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                let o = (p * ho + i) * wo + j;
                out[o] = x[best];
                argmax[o] = best as u32;
            }
        }
    }
    argmax
}

/// Source taps and weights for ×2 bilinear upsampling along one axis with
/// half-pixel centers.
pub(crate) fn upsample_taps(n_in: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n_in)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample2(x: &[f64], planes: usize, h: usize, w: usize, out: &mut [f64]) {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (i, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (j, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                dst[i * wo + j] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
}

pub(crate) fn upsample2_backward(dy: &[f64], planes: usize, h: usize, w: usize, dx: &mut [f64]) {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    for p in 0..planes {
        let g = &dy[p * ho * wo..(p + 1) * ho * wo];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for (i, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (j, &(x0, x1, lx)) in tx.iter().enumerate() {
                let v = g[i * wo + j];
                d[y0 * w + x0] += v * (1.0 - ly) * (1.0 - lx);
                d[y0 * w + x1] += v * (1.0 - ly) * lx;
                d[y1 * w + x0] += v * ly * (1.0 - lx);
                d[y1 * w + x1] += v * ly * lx;
            }
        }
    }
}

/// Four bilinear taps (plane offsets and weights) of one RoIAlign bin.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BilinearTap {
    pub idx: [u32; 4],
    pub wt: [f64; 4],
}

/// One sample per bin at the bin center, clamped to the map. Feature pixel
/// `k` is centered at `k + 0.5`.
pub(crate) fn roi_taps(
    roi: [f64; 4],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    taps: &mut Vec<BilinearTap>,
) {
    let [x0, y0, x1, y1] = roi;
    let bw = (x1 - x0) / out_w as f64;
    let bh = (y1 - y0) / out_h as f64;
    let axis = |v: f64, n: usize| -> (usize, usize, f64) {
        let v = v.clamp(0.0, (n - 1) as f64);
        let lo = (v.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        (lo, hi, v - lo as f64)
    };
    for i in 0..out_h {
        let (ylo, yhi, ly) = axis(y0 + (i as f64 + 0.5) * bh - 0.5, h);
        for j in 0..out_w {
            let (xlo, xhi, lx) = axis(x0 + (j as f64 + 0.5) * bw - 0.5, w);
            taps.push(BilinearTap {
                idx: [
                    (ylo * w + xlo) as u32,
                    (ylo * w + xhi) as u32,
                    (yhi * w + xlo) as u32,
                    (yhi * w + xhi) as u32,
                ],
                wt: [
                    (1.0 - ly) * (1.0 - lx),
                    (1.0 - ly) * lx,
                    ly * (1.0 - lx),
                    ly * lx,
                ],
            });
        }
    }
}

/// Cosine similarity with the denominator floored at `eps`. The
/// denominator is `sqrt(‖l‖²·‖r‖²)`, which makes identical inputs score
/// exactly 1.
pub(crate) fn cosine(l: &[f64], r: &[f64], eps: f64) -> (f64, f64, f64, f64) {
    let mut dot = 0.0;
    let mut ll = 0.0;
    let mut rr = 0.0;
    for (a, b) in l.iter().zip(r.iter()) {
        dot += a * b;
        ll += a * a;
        rr += b * b;
    }
    let nl = ll.sqrt();
    let nr = rr.sqrt();
    let denom = (ll * rr).sqrt().max(eps);
    // Rounding can land a hair outside [-1, 1].
    ((dot / denom).clamp(-1.0, 1.0), nl, nr, denom)
}
