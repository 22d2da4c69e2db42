//! Slice-level forward and backward kernels behind the graph ops.
//!
//! All loops run in a fixed order so results are bit-reproducible.

use super::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Input row/column feeding output position `o` through tap `t`, if inside the image.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// `[oh*ow, k*k*cin]` patch matrix; out-of-image taps are zero.
fn im2col<T: Real>(g: &ConvGeom, input: &[T]) -> Vec<T> {
    let (k, cin) = (g.k, g.cin);
    let row_len = k * k * cin;
    let mut cols = vec![T::zero(); g.oh * g.ow * row_len];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut cols[(oy * g.ow + ox) * row_len..][..row_len];
            for ky in 0..k {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..k {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    row[(ky * k + kx) * cin..][..cin].copy_from_slice(&input[(iy * g.w + ix) * cin..][..cin]);
                }
            }
        }
    }
    cols
}

/// Scatter-adds a patch-matrix gradient back onto the input image.
fn col2im_add<T: Real>(g: &ConvGeom, cols: &[T], grad_input: &mut [T]) {
    let (k, cin) = (g.k, g.cin);
    let row_len = k * k * cin;
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &cols[(oy * g.ow + ox) * row_len..][..row_len];
            for ky in 0..k {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..k {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let dst = &mut grad_input[(iy * g.w + ix) * cin..][..cin];
                    for (d, &v) in dst.iter_mut().zip(&row[(ky * k + kx) * cin..][..cin]) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

fn transpose<T: Real>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    let mut t = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

const MR: usize = 4;
const NR: usize = 8;

/// `c[m, n] += a[m, kd] · b[kd, n]`, all row-major.
///
/// Register-tiled in `MR x NR` blocks; every output element is reduced over
/// `kd` in ascending order, so results do not depend on the tiling.
pub fn gemm_acc<T: Real>(m: usize, n: usize, kd: usize, a: &[T], b: &[T], c: &mut [T]) {
    let mut i = 0;
    while i + MR <= m {
        let arows: [&[T]; MR] = std::array::from_fn(|r| &a[(i + r) * kd..][..kd]);
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[T::zero(); NR]; MR];
            for p in 0..kd {
                let brow: &[T; NR] = b[p * n + j..p * n + j + NR].try_into().expect("tile width");
                for r in 0..MR {
                    let av = arows[r][p];
                    for q in 0..NR {
                        acc[r][q] = acc[r][q] + av * brow[q];
                    }
                }
            }
            for (r, accr) in acc.iter().enumerate() {
                for (q, &v) in accr.iter().enumerate() {
                    let dst = &mut c[(i + r) * n + j + q];
                    *dst = *dst + v;
                }
            }
            j += NR;
        }
        if j < n {
            gemm_scalar(i, i + MR, j, n, kd, a, b, c, n);
        }
        i += MR;
    }
    if i < m {
        gemm_scalar(i, m, 0, n, kd, a, b, c, n);
    }
}

/// `c[m, n] += aᵀ · b` for `a: [kd, m]`, `b: [kd, n]` (reduction over rows).
pub fn gemm_tn_acc<T: Real>(m: usize, n: usize, kd: usize, a: &[T], b: &[T], c: &mut [T]) {
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[T::zero(); NR]; MR];
            for p in 0..kd {
                let acol: &[T; MR] = a[p * m + i..p * m + i + MR].try_into().expect("tile height");
                let brow: &[T; NR] = b[p * n + j..p * n + j + NR].try_into().expect("tile width");
                for r in 0..MR {
                    for q in 0..NR {
                        acc[r][q] = acc[r][q] + acol[r] * brow[q];
                    }
                }
            }
            for (r, accr) in acc.iter().enumerate() {
                for (q, &v) in accr.iter().enumerate() {
                    let dst = &mut c[(i + r) * n + j + q];
                    *dst = *dst + v;
                }
            }
            j += NR;
        }
        if j < n {
            gemm_tn_scalar(i, i + MR, j, n, m, kd, a, b, c);
        }
        i += MR;
    }
    if i < m {
        gemm_tn_scalar(i, m, 0, n, m, kd, a, b, c);
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_tn_scalar<T: Real>(r0: usize, r1: usize, c0: usize, c1: usize, m: usize, kd: usize, a: &[T], b: &[T], c: &mut [T]) {
    let n = c.len() / m;
    for r in r0..r1 {
        for q in c0..c1 {
            let mut acc = T::zero();
            for p in 0..kd {
                acc = acc + a[p * m + r] * b[p * n + q];
            }
            c[r * n + q] = c[r * n + q] + acc;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_scalar<T: Real>(r0: usize, r1: usize, c0: usize, c1: usize, kd: usize, a: &[T], b: &[T], c: &mut [T], n: usize) {
    for r in r0..r1 {
        let arow = &a[r * kd..][..kd];
        for q in c0..c1 {
            let mut acc = T::zero();
            for p in 0..kd {
                acc = acc + arow[p] * b[p * n + q];
            }
            c[r * n + q] = c[r * n + q] + acc;
        }
    }
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.k == 1 && g.stride == 1 && g.pad == 0
}

pub fn conv2d_forward<T: Real>(g: &ConvGeom, input: &[T], kernel: &[T], bias: &[T], out: &mut [T]) {
    for px in out.chunks_exact_mut(g.cout) {
        px.copy_from_slice(bias);
    }
    let kd = g.k * g.k * g.cin;
    let npix = g.oh * g.ow;
    if is_pointwise(g) {
        gemm_acc(npix, g.cout, kd, input, kernel, out);
    } else {
        let cols = im2col(g, input);
        gemm_acc(npix, g.cout, kd, &cols, kernel, out);
    }
}

/// Accumulates gradients w.r.t. input (when `grad_input` is given), kernel and bias.
pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    grad_input: Option<&mut [T]>,
    grad_kernel: &mut [T],
    grad_bias: &mut [T],
) {
    let kd = g.k * g.k * g.cin;
    let npix = g.oh * g.ow;
    for go in grad_out.chunks_exact(g.cout) {
        for (gb, &v) in grad_bias.iter_mut().zip(go) {
            *gb = *gb + v;
        }
    }
    let owned;
    let cols: &[T] = if is_pointwise(g) {
        input
    } else {
        owned = im2col(g, input);
        &owned
    };
    // dK[kd, cout] += colsᵀ · dY
    gemm_tn_acc(kd, g.cout, npix, cols, grad_out, grad_kernel);
    if let Some(gi) = grad_input {
        // dCols[npix, kd] = dY[npix, cout] · Kᵀ[cout, kd]
        let kernel_t = transpose(kd, g.cout, kernel);
        if is_pointwise(g) {
            gemm_acc(npix, kd, g.cout, grad_out, &kernel_t, gi);
        } else {
            let mut dcols = vec![T::zero(); npix * kd];
            gemm_acc(npix, kd, g.cout, grad_out, &kernel_t, &mut dcols);
            col2im_add(g, &dcols, gi);
        }
    }
}

/// Bilinear resampling taps along one axis (half-pixel centers, edge clamped).
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + tanh(c * (x + a * x * x * x)))
}

/// `tanh` through a single `exp`, cheaper than libm's `tanhf`.
#[inline]
fn tanh<T: Real>(u: T) -> T {
    let two = T::of(2.0);
    let t = T::one() - two / ((two * u.abs()).exp() + T::one());
    if u < T::zero() {
        -t
    } else {
        t
    }
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let th = tanh(u);
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
