//! Dense kernels for the encoder: scalar trait, GEMM, im2col/col2im for 3×3
//! stride-2 convolutions, instance norm and leaky ReLU.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

pub trait Real: Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static {
    /// `c ← alpha·a·b + beta·c` on strided matrices (see `matrixmultiply`).
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                // SAFETY: `gemm` below checks that every slice covers the
                // m×k, k×n and m×n extents addressed by these strides.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Row-major `C[m×n] = op(A)·op(B) + beta·C`, where `op(A)` is `m×k`.
///
/// With `trans_a` the buffer `a` holds a `k×m` matrix; with `trans_b` the
/// buffer `b` holds an `n×k` matrix.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], trans_a: bool, b: &[T], trans_b: bool, c: &mut [T], beta: T) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    T::gemm_raw(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;

#[inline]
pub fn conv_out_size(n: usize) -> usize {
    // 3×3, stride 2, padding 1
    (n + 1) / 2
}

/// Unfolds a `[c, h, w]` tensor into `[c·9, ho·wo]` columns.
pub fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, cols: &mut Vec<T>) {
    let (ho, wo) = (conv_out_size(h), conv_out_size(w));
    let hw = ho * wo;
    cols.clear();
    cols.resize(c * 9 * hw, T::zero());
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ch * 9) + ky * 3 + kx) * hw..((ch * 9) + ky * 3 + kx + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * 2 + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * 2 + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds `[c·9, ho·wo]` columns back into `[c, h, w]`.
pub fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (conv_out_size(h), conv_out_size(w));
    let hw = ho * wo;
    let mut x = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ch * 9) + ky * 3 + kx) * hw..((ch * 9) + ky * 3 + kx + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * 2 + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, s) in row[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * 2 + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += *s;
                        }
                    }
                }
            }
        }
    }
    x
}

#[inline]
pub fn leaky<T: Real>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        v * T::from_f64(LEAKY_SLOPE)
    }
}

#[inline]
pub fn leaky_grad<T: Real>(pre: T) -> T {
    if pre > T::zero() {
        T::one()
    } else {
        T::from_f64(LEAKY_SLOPE)
    }
}

/// Per-channel normalization of a `[c, n]` tensor. Returns `(xhat, inv_std)`.
pub fn instance_norm<T: Real>(x: &[T], c: usize, n: usize) -> (Vec<T>, Vec<T>) {
    let mut xhat = vec![T::zero(); c * n];
    let mut inv_std = vec![T::zero(); c];
    let nf = n as f64;
    for ch in 0..c {
        let row = &x[ch * n..(ch + 1) * n];
        // Statistics in f64 regardless of T.
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / nf;
        let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / nf;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[ch] = T::from_f64(is);
        for (o, v) in xhat[ch * n..(ch + 1) * n].iter_mut().zip(row) {
            *o = T::from_f64((v.as_f64() - mean) * is);
        }
    }
    (xhat, inv_std)
}

/// Gradient of instance norm (before the affine step) with respect to its input.
pub fn instance_norm_backward<T: Real>(dxhat: &[T], xhat: &[T], inv_std: &[T], c: usize, n: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); c * n];
    let nf = n as f64;
    for ch in 0..c {
        let g = &dxhat[ch * n..(ch + 1) * n];
        let xh = &xhat[ch * n..(ch + 1) * n];
        let sum_g: f64 = g.iter().map(|v| v.as_f64()).sum();
        let sum_gx: f64 = g.iter().zip(xh).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
        let is = inv_std[ch].as_f64();
        for ((o, gv), xv) in dx[ch * n..(ch + 1) * n].iter_mut().zip(g).zip(xh) {
            *o = T::from_f64(is / nf * (nf * gv.as_f64() - sum_g - xv.as_f64() * sum_gx));
        }
    }
    dx
}

/// Bilinear resample of an sRGB image into planar `[3, size, size]` (half-pixel
/// centers, edge clamped).
pub fn resize_bilinear_planar(data: &[f32], width: usize, height: usize, size: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; 3 * size * size];
    let sx = width as f64 / size as f64;
    let sy = height as f64 / size as f64;
    let axis = |dst: usize, scale: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    for oy in 0..size {
        let (y0, y1, ty) = axis(oy, sy, height);
        for ox in 0..size {
            let (x0, x1, tx) = axis(ox, sx, width);
            for ch in 0..3 {
                let p = |x: usize, y: usize| data[(y * width + x) * 3 + ch] as f64;
                let top = p(x0, y0) * (1.0 - tx) + p(x1, y0) * tx;
                let bot = p(x0, y1) * (1.0 - tx) + p(x1, y1) * tx;
                out[ch * size * size + oy * size + ox] = (top * (1.0 - ty) + bot * ty) as f32;
            }
        }
    }
    out
}
