//! Dense kernels shared by the tape ops. All of them split work over disjoint
//! output rows and keep the per-element reduction order fixed.

use super::Real;
use crate::par;

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`
pub fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    par::for_each_row(c, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip != T::zero() {
                axpy(aip, &b[p * n..(p + 1) * n], row);
            }
        }
    });
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    par::for_each_row(c, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cij) in row.iter_mut().enumerate() {
            *cij += dot(arow, &b[j * k..(j + 1) * k]);
        }
    });
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    par::for_each_row(c, n, |i, row| {
        for p in 0..k {
            let api = a[p * m + i];
            if api != T::zero() {
                axpy(api, &b[p * n..(p + 1) * n], row);
            }
        }
    });
}

pub fn transpose<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    par::for_each_row(&mut out, rows, |j, orow| {
        for (i, o) in orow.iter_mut().enumerate() {
            *o = x[i * cols + j];
        }
    });
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
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
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Some(Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `x[C,H,W]` into `cols[C·k·k, OH·OW]` with zero padding.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let ncols = g.oh * g.ow;
    let mut cols = vec![T::zero(); g.c * g.k * g.k * ncols];
    par::for_each_row(&mut cols, ncols, |r, row| {
        let c = r / (g.k * g.k);
        let ky = (r / g.k) % g.k;
        let kx = r % g.k;
        for oy in 0..g.oh {
            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
            if iy < 0 || iy >= g.h as isize {
                continue;
            }
            let base = (c * g.h + iy as usize) * g.w;
            for ox in 0..g.ow {
                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                if ix >= 0 && (ix as usize) < g.w {
                    row[oy * g.ow + ox] = x[base + ix as usize];
                }
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`]: scatters `cols` back onto `dx[C,H,W]`.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ncols = g.oh * g.ow;
    // One worker per input channel; each reads only its own k·k column rows.
    par::for_each_row(dx, g.h * g.w, |c, plane| {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (c * g.k + ky) * g.k + kx;
                let row = &cols[r * ncols..(r + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            plane[iy as usize * g.w + ix as usize] += row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    });
}

/// `[C,H,W] -> [C·r², H/r, W/r]`, output channel `c·r² + dy·r + dx`.
pub fn pixel_unshuffle<T: Real>(x: &[T], _c: usize, h: usize, w: usize, r: usize) -> Vec<T> {
    let (oh, ow) = (h / r, w / r);
    let mut out = vec![T::zero(); x.len()];
    par::for_each_row(&mut out, oh * ow, |oc, plane| {
        let ci = oc / (r * r);
        let dy = (oc / r) % r;
        let dx = oc % r;
        for y in 0..oh {
            for xx in 0..ow {
                plane[y * ow + xx] = x[(ci * h + y * r + dy) * w + xx * r + dx];
            }
        }
    });
    out
}

/// Inverse of [`pixel_unshuffle`]: `[C·r², H, W] -> [C, H·r, W·r]`.
pub fn pixel_shuffle<T: Real>(x: &[T], _c_in: usize, h: usize, w: usize, r: usize) -> Vec<T> {
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![T::zero(); x.len()];
    par::for_each_row(&mut out, oh * ow, |ci, plane| {
        for oy in 0..oh {
            for ox in 0..ow {
                let ic = ci * r * r + (oy % r) * r + ox % r;
                plane[oy * ow + ox] = x[(ic * h + oy / r) * w + ox / r];
            }
        }
    });
    out
}

/// Sum whose result does not depend on the order of `values`.
pub fn order_free_sum<T: Real>(values: &mut [T]) -> T {
    values.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    values.iter().fold(T::zero(), |acc, &v| acc + v)
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
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (5, 19, 7);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 13 % 7) as f64) * 0.5 - 1.0).collect();
        let want = naive_mm(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut c, m, k, n);
        assert_eq!(c, want);

        let bt = transpose(&b, k, n);
        let mut c = vec![0.0; m * n];
        gemm_nt(&a, &bt, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-9);
        }

        let at = transpose(&a, m, k);
        let mut c = vec![0.0; m * n];
        gemm_tn(&at, &b, &mut c, m, k, n);
        assert_eq!(c, want);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(2, 5, 4, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..g.c * g.h * g.w).map(|i| (i as f64 * 0.7).sin()).collect();
        let cols = im2col(&x, &g);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 1.3).cos()).collect();
        let mut aty = vec![0.0; x.len()];
        col2im(&y, &g, &mut aty);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn order_free_sum_ignores_permutation() {
        let mut a = [1e8f32, 1.0, -1e8, 3.5, 1e-3, 7.0];
        let mut b = [7.0f32, 1e-3, 3.5, -1e8, 1.0, 1e8];
        assert_eq!(order_free_sum(&mut a).to_bits(), order_free_sum(&mut b).to_bits());
    }
}
