//! Slice-level kernels behind the tape primitives. Convolutions go through
//! im2col so the inner loops are contiguous axpy/dot sweeps.

use crate::scalar::Scalar;

#[inline]
pub(crate) fn axpy<S: Scalar>(y: &mut [S], a: S, x: &[S]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

#[inline]
pub(crate) fn dot<S: Scalar>(x: &[S], y: &[S]) -> S {
    // Eight lanes so the compiler can vectorize; the order is fixed, so results are reproducible.
    let n = x.len().min(y.len());
    let (xc, yc) = (x[..n].chunks_exact(8), y[..n].chunks_exact(8));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    let mut acc = [S::zero(); 8];
    for (a, b) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] += a[l] * b[l];
        }
    }
    let mut tail = S::zero();
    for (&a, &b) in xr.iter().zip(yr) {
        tail += a * b;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Geometry of a strided, zero-padded square-kernel correlation over one image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Output index range `lo..hi` whose input coordinate `o*stride + kk - pad` lies in `0..n`.
    #[inline]
    fn valid_range(&self, kk: usize, n: usize, on: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kk as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= n-1
        let top = n as isize - 1 - off;
        let hi = if top < 0 { 0 } else { top / s + 1 };
        let lo = lo.max(0) as usize;
        let hi = (hi.max(0) as usize).min(on);
        (lo.min(hi), hi)
    }
}

/// Unfolds `x` (c·h·w) into `col` ((c·k·k) × (oh·ow)); `col` must be zeroed by the caller
/// or fully overwritten, which this function does.
pub(crate) fn im2col<S: Scalar>(x: &[S], g: &ConvGeom, col: &mut [S]) {
    let p = g.cols();
    col.iter_mut().for_each(|v| *v = S::zero());
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            let (oy_lo, oy_hi) = g.valid_range(ki, g.h, g.oh);
            for kj in 0..g.k {
                let (ox_lo, ox_hi) = g.valid_range(kj, g.w, g.ow);
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ki - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if g.stride == 1 {
                        let ix0 = ox_lo + kj - g.pad;
                        drow[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            drow[ox] = src[ox * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back into `x`, accumulating.
pub(crate) fn col2im<S: Scalar>(col: &[S], g: &ConvGeom, x: &mut [S]) {
    let p = g.cols();
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            let (oy_lo, oy_hi) = g.valid_range(ki, g.h, g.oh);
            for kj in 0..g.k {
                let (ox_lo, ox_hi) = g.valid_range(kj, g.w, g.ow);
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ki - g.pad;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let srow = &src[oy * g.ow..(oy + 1) * g.ow];
                    if g.stride == 1 {
                        let ix0 = ox_lo + kj - g.pad;
                        for (d, &s) in dst[ix0..ix0 + (ox_hi - ox_lo)]
                            .iter_mut()
                            .zip(&srow[ox_lo..ox_hi])
                        {
                            *d += s;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst[ox * g.stride + kj - g.pad] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Column block for the gemm kernels; keeps a block of `b` resident in cache.
const PB: usize = 256;

/// `out (m×p) += a (m×r) · b (r×p)`
pub(crate) fn gemm_nn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, r: usize, p: usize) {
    for p0 in (0..p).step_by(PB) {
        let p1 = (p0 + PB).min(p);
        let mut i = 0;
        while i + 4 <= m {
            let coef = |j: usize| [a[i * r + j], a[(i + 1) * r + j], a[(i + 2) * r + j], a[(i + 3) * r + j]];
            let mut rows = rows4(out, i, p, p0, p1);
            for j in 0..r {
                axpy4(&mut rows, coef(j), &b[j * p + p0..j * p + p1]);
            }
            i += 4;
        }
        for i in i..m {
            let orow = &mut out[i * p + p0..i * p + p1];
            for j in 0..r {
                let av = a[i * r + j];
                if av != S::zero() {
                    axpy(orow, av, &b[j * p + p0..j * p + p1]);
                }
            }
        }
    }
}

/// `out (r×p) += aᵀ · b` with `a (m×r)`, `b (m×p)`.
pub(crate) fn gemm_tn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, r: usize, p: usize) {
    for p0 in (0..p).step_by(PB) {
        let p1 = (p0 + PB).min(p);
        let mut j = 0;
        while j + 4 <= r {
            let mut rows = rows4(out, j, p, p0, p1);
            for i in 0..m {
                let base = i * r + j;
                axpy4(&mut rows, [a[base], a[base + 1], a[base + 2], a[base + 3]], &b[i * p + p0..i * p + p1]);
            }
            j += 4;
        }
        for j in j..r {
            let orow = &mut out[j * p + p0..j * p + p1];
            for i in 0..m {
                let av = a[i * r + j];
                if av != S::zero() {
                    axpy(orow, av, &b[i * p + p0..i * p + p1]);
                }
            }
        }
    }
}

/// Four disjoint row slices `[p0, p1)` of rows `i..i+4` in a row-major `(·×p)` buffer.
fn rows4<S>(out: &mut [S], i: usize, p: usize, p0: usize, p1: usize) -> [&mut [S]; 4] {
    let (_, rest) = out.split_at_mut(i * p);
    let (r0, rest) = rest.split_at_mut(p);
    let (r1, rest) = rest.split_at_mut(p);
    let (r2, rest) = rest.split_at_mut(p);
    let r3 = &mut rest[..p];
    [&mut r0[p0..p1], &mut r1[p0..p1], &mut r2[p0..p1], &mut r3[p0..p1]]
}

#[inline]
fn axpy4<S: Scalar>(rows: &mut [&mut [S]; 4], c: [S; 4], x: &[S]) {
    let [y0, y1, y2, y3] = rows;
    let n = x.len();
    let (y0, y1, y2, y3) = (&mut y0[..n], &mut y1[..n], &mut y2[..n], &mut y3[..n]);
    for k in 0..n {
        let xv = x[k];
        y0[k] += c[0] * xv;
        y1[k] += c[1] * xv;
        y2[k] += c[2] * xv;
        y3[k] += c[3] * xv;
    }
}

/// `out (m×r) += a (m×p) · bᵀ` with `b (r×p)`.
pub(crate) fn gemm_nt<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, r: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        for j in 0..r {
            out[i * r + j] += dot(arow, &b[j * p..(j + 1) * p]);
        }
    }
}

/// Valid-mode correlation of one plane with a square kernel.
pub(crate) fn blur_plane<S: Scalar>(x: &[S], h: usize, w: usize, kernel: &[S], k: usize, out: &mut [S]) {
    let (oh, ow) = (h - k + 1, w - k + 1);
    for ki in 0..k {
        for kj in 0..k {
            let wv = kernel[ki * k + kj];
            for oy in 0..oh {
                let src = &x[(oy + ki) * w + kj..(oy + ki) * w + kj + ow];
                axpy(&mut out[oy * ow..(oy + 1) * ow], wv, src);
            }
        }
    }
}

/// Adjoint of [`blur_plane`], accumulating into `gx`.
pub(crate) fn blur_plane_adjoint<S: Scalar>(
    gout: &[S],
    h: usize,
    w: usize,
    kernel: &[S],
    k: usize,
    gx: &mut [S],
) {
    let (oh, ow) = (h - k + 1, w - k + 1);
    for ki in 0..k {
        for kj in 0..k {
            let wv = kernel[ki * k + kj];
            for oy in 0..oh {
                let dst = &mut gx[(oy + ki) * w + kj..(oy + ki) * w + kj + ow];
                axpy(dst, wv, &gout[oy * ow..(oy + 1) * ow]);
            }
        }
    }
}
