//! Slice-level numeric kernels shared by forward and backward rules.
//!
//! All matrices are row-major. Reductions use fixed lane-split accumulation
//! so results are deterministic for a given input.

use crate::scalar::Scalar;

const LANES: usize = 8;

/// Dot product with a fixed 8-lane reduction order.
#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let aa = &a[c * LANES..c * LANES + LANES];
        let bb = &b[c * LANES..c * LANES + LANES];
        for l in 0..LANES {
            acc[l] += aa[l] * bb[l];
        }
    }
    let mut tail = S::zero();
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    let s01 = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    let s23 = (acc[4] + acc[5]) + (acc[6] + acc[7]);
    (s01 + s23) + tail
}

#[inline]
fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `c (m×n) += a (m×k) · b (k×n)`.
pub fn gemm_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != S::zero() {
                axpy(av, &b[p * n..(p + 1) * n], crow);
            }
        }
    }
}

/// `c (m×n) += a (m×k) · bᵀ` where `b` is `n×k`.
pub fn gemm_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c (m×n) += aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
pub fn gemm_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av != S::zero() {
                axpy(av, brow, &mut c[i * n..(i + 1) * n]);
            }
        }
    }
}

pub fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Geometry of a 2-D convolution or pooling window over an `N×C×H×W` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_plane(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Input coordinate touched by output position `o` at kernel offset `ki`.
    #[inline]
    fn source(&self, o: usize, ki: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + ki) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }

    /// Output positions `lo..hi` whose input coordinate at kernel offset
    /// `ki` lies inside `0..limit`, for `out` output positions.
    #[inline]
    fn valid(&self, ki: usize, limit: usize, out: usize) -> (usize, usize) {
        // o*stride + ki - pad in [0, limit)
        let lo = self.pad.saturating_sub(ki).div_ceil(self.stride);
        let hi = if limit + self.pad > ki { (limit + self.pad - ki).div_ceil(self.stride) } else { 0 };
        (lo.min(out), hi.min(out).max(lo.min(out)))
    }
}

/// Unfolds a batch into columns of shape `(C·k·k) × (N·H'·W')`.
pub fn im2col<S: Scalar>(x: &[S], g: &Window) -> Vec<S> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let cols_n = g.n * plane;
    let mut cols = vec![S::zero(); g.c * g.k * g.k * cols_n];
    for c in 0..g.c {
        for ki in 0..g.k {
            let (y_lo, y_hi) = g.valid(ki, g.h, oh);
            for kj in 0..g.k {
                let (x_lo, x_hi) = g.valid(kj, g.w, ow);
                let row = (c * g.k + ki) * g.k + kj;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let dst = &mut dst_row[n * plane..(n + 1) * plane];
                    for oy in y_lo..y_hi {
                        let iy = oy * g.stride + ki - g.pad;
                        let d = &mut dst[oy * ow + x_lo..oy * ow + x_hi];
                        let first = iy * g.w + x_lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            d.copy_from_slice(&src[first..first + d.len()]);
                        } else {
                            for (i, v) in d.iter_mut().enumerate() {
                                *v = src[first + i * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im<S: Scalar>(cols: &[S], g: &Window, dx: &mut [S]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let cols_n = g.n * plane;
    for c in 0..g.c {
        for ki in 0..g.k {
            let (y_lo, y_hi) = g.valid(ki, g.h, oh);
            for kj in 0..g.k {
                let (x_lo, x_hi) = g.valid(kj, g.w, ow);
                let row = (c * g.k + ki) * g.k + kj;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.n {
                    let dst = &mut dx[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let src = &src_row[n * plane..(n + 1) * plane];
                    for oy in y_lo..y_hi {
                        let iy = oy * g.stride + ki - g.pad;
                        let s = &src[oy * ow + x_lo..oy * ow + x_hi];
                        let first = iy * g.w + x_lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            for (d, &v) in dst[first..first + s.len()].iter_mut().zip(s) {
                                *d += v;
                            }
                        } else {
                            for (i, &v) in s.iter().enumerate() {
                                dst[first + i * g.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Max pooling forward; returns outputs and the flat input index of each max.
pub fn max_pool<S: Scalar>(x: &[S], g: &Window) -> (Vec<S>, Vec<usize>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = Vec::with_capacity(g.n * g.c * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for nc in 0..g.n * g.c {
        let base = nc * g.h * g.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = S::neg_infinity();
                let mut best_i = base;
                for ki in 0..g.k {
                    let Some(iy) = g.source(oy, ki, g.h) else { continue };
                    for kj in 0..g.k {
                        if let Some(ix) = g.source(ox, kj, g.w) {
                            let i = base + iy * g.w + ix;
                            if x[i] > best || (x[i].is_nan() && !best.is_nan()) {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

/// Splits a shape around `axis` into `(outer, axis_len, inner)`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Visits `x` in runs along its last axis, pairing each run with the offset
/// and stride of the matching run in a broadcast operand of shape `b_shape`.
///
/// `b_shape` has the rank of `x_shape` and each dimension equals the one in
/// `x_shape` or is 1.
pub fn for_each_broadcast_run(
    x_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let rank = x_shape.len();
    if rank == 0 {
        f(0, 1, 0, 0);
        return;
    }
    let mut b_strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        b_strides[d] = if b_shape[d] == 1 { 0 } else { acc };
        acc *= b_shape[d];
    }
    let inner = x_shape[rank - 1];
    let inner_stride = b_strides[rank - 1];
    let outer: usize = x_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let mut b_off = 0usize;
    for run in 0..outer {
        f(run * inner, inner, b_off, inner_stride);
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            b_off += b_strides[d];
            if idx[d] < x_shape[d] {
                break;
            }
            b_off -= b_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_variants_agree_with_triple_loop() {
        let (m, k, n) = (3, 11, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive_mm(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut c, m, k, n);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        let bt = transpose(&b, k, n);
        let mut c = vec![0.0; m * n];
        gemm_nt(&a, &bt, &mut c, m, k, n);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        let at = transpose(&a, m, k);
        let mut c = vec![0.0; m * n];
        gemm_tn(&at, &b, &mut c, m, k, n);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn broadcast_runs_cover_channel_pattern() {
        // x: 2×3×2, b: 1×3×1
        let mut seen = Vec::new();
        for_each_broadcast_run(&[2, 3, 2], &[1, 3, 1], |xo, len, bo, bs| {
            seen.push((xo, len, bo, bs))
        });
        assert_eq!(
            seen,
            vec![
                (0, 2, 0, 0),
                (2, 2, 1, 0),
                (4, 2, 2, 0),
                (6, 2, 0, 0),
                (8, 2, 1, 0),
                (10, 2, 2, 0)
            ]
        );
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = Window { n: 2, c: 2, h: 5, w: 4, k: 3, stride: 2, pad: 1 };
        let x: Vec<f64> = (0..g.n * g.c * g.h * g.w).map(|i| (i as f64).sin()).collect();
        let cols = im2col(&x, &g);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.3).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
