//! Learnable lookup tables: per-channel 1D curves, 3D lattices with trilinear
//! interpolation, basis-grid fusion, smoothness/monotonicity regularizers and
//! the analytic gradients of all of them.
//!
//! # 3D lattice layout
//!
//! A `Lut3D` of dimension `D` stores `D³` RGB entries. Lattice point `(i, j, k)`
//! sits at input `(r, g, b) = (k, j, i) / (D − 1)`, so **`k` indexes red, `j`
//! green and `i` blue**, and red varies fastest in memory:
//!
//! ```text
//! flat(i, j, k) = (i·D + j)·D + k        entry channel c at 3·flat + c
//! ```
//!
//! This is the same ordering as the rows of a `.cube` file (see [`cube`]).

use thiserror::Error;

pub mod cube;

#[derive(Debug, Error, PartialEq)]
pub enum LutError {
    #[error("invalid LUT size {0}; at least 2 entries per axis are required")]
    InvalidSize(usize),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("non-finite LUT entry")]
    NonFinite,
}

#[inline]
fn clamp01(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(0.0, 1.0)
    }
}

/// Splits a clamped coordinate into a cell index and fractional offset.
///
/// Coordinates within a few ulps of a lattice point snap onto it so that
/// lookups at `i / (n − 1)` return the stored entry bit-for-bit.
#[inline]
fn locate(x: f64, n: usize) -> (usize, f64) {
    let scale = (n - 1) as f64;
    let mut pos = x * scale;
    let nearest = pos.round();
    if (pos - nearest).abs() <= 8.0 * f64::EPSILON * scale.max(1.0) {
        pos = nearest;
    }
    let idx = (pos.floor() as usize).min(n - 2);
    (idx, pos - idx as f64)
}

/// A 1D curve over `[0, 1]` sampled at `S` evenly spaced points.
#[derive(Debug, Clone, PartialEq)]
pub struct Lut1D {
    entries: Vec<f64>,
}

impl Lut1D {
    pub fn identity(size: usize) -> Result<Self, LutError> {
        if size < 2 {
            return Err(LutError::InvalidSize(size));
        }
        let scale = (size - 1) as f64;
        Ok(Self { entries: (0..size).map(|i| i as f64 / scale).collect() })
    }

    pub fn from_entries(entries: Vec<f64>) -> Result<Self, LutError> {
        if entries.len() < 2 {
            return Err(LutError::InvalidSize(entries.len()));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(LutError::NonFinite);
        }
        Ok(Self { entries })
    }

    /// `self − identity(S)`, entry-wise.
    pub fn deviation_from_identity(&self) -> Self {
        let scale = (self.entries.len() - 1) as f64;
        Self { entries: self.entries.iter().enumerate().map(|(i, e)| e - i as f64 / scale).collect() }
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn apply(&self, x: f64) -> f64 {
        let (i, t) = locate(clamp01(x), self.entries.len());
        if t == 0.0 {
            return self.entries[i];
        }
        self.entries[i] * (1.0 - t) + self.entries[i + 1] * t
    }

    /// Returns the two touched entries with their weights, and `d out / d x`.
    ///
    /// The input derivative is zero when `x` lies outside `[0, 1]`.
    pub fn backward(&self, x: f64) -> Lut1DGrad {
        let inside = (0.0..=1.0).contains(&x);
        let n = self.entries.len();
        let (i, t) = locate(clamp01(x), n);
        let slope = (self.entries[i + 1] - self.entries[i]) * (n - 1) as f64;
        Lut1DGrad {
            index: i,
            weights: [1.0 - t, t],
            d_input: if inside { slope } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lut1DGrad {
    /// Lower bracketing entry; the upper one is `index + 1`.
    pub index: usize,
    pub weights: [f64; 2],
    pub d_input: f64,
}

impl Lut1DGrad {
    pub fn accumulate(&self, upstream: f64, grad_entries: &mut [f64]) {
        grad_entries[self.index] += self.weights[0] * upstream;
        grad_entries[self.index + 1] += self.weights[1] * upstream;
    }
}

/// One curve per Lab axis (`l`, `a`, `b`), all sharing a bin count.
#[derive(Debug, Clone, PartialEq)]
pub struct Lut1DTriple {
    pub l: Lut1D,
    pub a: Lut1D,
    pub b: Lut1D,
}

impl Lut1DTriple {
    pub fn identity(size: usize) -> Result<Self, LutError> {
        let id = Lut1D::identity(size)?;
        Ok(Self { l: id.clone(), a: id.clone(), b: id })
    }

    pub fn new(l: Lut1D, a: Lut1D, b: Lut1D) -> Result<Self, LutError> {
        for other in [&a, &b] {
            if other.len() != l.len() {
                return Err(LutError::DimensionMismatch { expected: l.len(), actual: other.len() });
            }
        }
        Ok(Self { l, a, b })
    }

    /// Builds the triple from a flat `[l.., a.., b..]` slice of length `3·S`.
    pub fn from_flat(flat: &[f64]) -> Result<Self, LutError> {
        if flat.len() % 3 != 0 {
            return Err(LutError::DimensionMismatch { expected: flat.len() / 3 * 3, actual: flat.len() });
        }
        let s = flat.len() / 3;
        Self::new(
            Lut1D::from_entries(flat[..s].to_vec())?,
            Lut1D::from_entries(flat[s..2 * s].to_vec())?,
            Lut1D::from_entries(flat[2 * s..].to_vec())?,
        )
    }

    pub fn size(&self) -> usize {
        self.l.len()
    }

    pub fn deviation_from_identity(&self) -> Self {
        Self {
            l: self.l.deviation_from_identity(),
            a: self.a.deviation_from_identity(),
            b: self.b.deviation_from_identity(),
        }
    }

    pub fn channels(&self) -> [&Lut1D; 3] {
        [&self.l, &self.a, &self.b]
    }

    pub fn apply(&self, x: [f64; 3]) -> [f64; 3] {
        [self.l.apply(x[0]), self.a.apply(x[1]), self.b.apply(x[2])]
    }
}

/// A `D×D×D` lattice of RGB outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Lut3D {
    dim: usize,
    grid: Vec<f64>,
}

/// Sparse gradient of one trilinear lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lut3DGrad {
    /// Lattice flat index and interpolation weight of the 8 participating corners.
    pub corners: [(usize, f64); 8],
    /// `d out_c / d in_k` as `[out][in]`.
    pub jacobian: [[f64; 3]; 3],
}

impl Lut3DGrad {
    /// Gradient with respect to the input color for a given upstream gradient.
    pub fn grad_input(&self, upstream: [f64; 3]) -> [f64; 3] {
        let mut g = [0.0; 3];
        for (c, up) in upstream.iter().enumerate() {
            for k in 0..3 {
                g[k] += up * self.jacobian[c][k];
            }
        }
        g
    }

    /// Adds `weight · upstream` into the 8 touched lattice entries of a dense
    /// `D³×3` buffer.
    pub fn accumulate(&self, upstream: [f64; 3], grad_grid: &mut [f64]) {
        for &(idx, w) in &self.corners {
            if w == 0.0 {
                continue;
            }
            let base = idx * 3;
            grad_grid[base] += w * upstream[0];
            grad_grid[base + 1] += w * upstream[1];
            grad_grid[base + 2] += w * upstream[2];
        }
    }
}

impl Lut3D {
    pub fn identity(dim: usize) -> Result<Self, LutError> {
        if dim < 2 {
            return Err(LutError::InvalidSize(dim));
        }
        let scale = (dim - 1) as f64;
        let mut grid = Vec::with_capacity(dim * dim * dim * 3);
        for i in 0..dim {
            for j in 0..dim {
                for k in 0..dim {
                    grid.extend_from_slice(&[k as f64 / scale, j as f64 / scale, i as f64 / scale]);
                }
            }
        }
        Ok(Self { dim, grid })
    }

    /// `self − identity(D)`, entry-wise.
    pub fn deviation_from_identity(&self) -> Self {
        let scale = (self.dim - 1) as f64;
        let mut grid = self.grid.clone();
        for (n, cell) in grid.chunks_exact_mut(3).enumerate() {
            let (i, j, k) = (n / (self.dim * self.dim), n / self.dim % self.dim, n % self.dim);
            cell[0] -= k as f64 / scale;
            cell[1] -= j as f64 / scale;
            cell[2] -= i as f64 / scale;
        }
        Self { dim: self.dim, grid }
    }

    pub fn zeros(dim: usize) -> Result<Self, LutError> {
        if dim < 2 {
            return Err(LutError::InvalidSize(dim));
        }
        Ok(Self { dim, grid: vec![0.0; dim * dim * dim * 3] })
    }

    pub fn from_grid(dim: usize, grid: Vec<f64>) -> Result<Self, LutError> {
        if dim < 2 {
            return Err(LutError::InvalidSize(dim));
        }
        let expected = dim * dim * dim * 3;
        if grid.len() != expected {
            return Err(LutError::DimensionMismatch { expected, actual: grid.len() });
        }
        if grid.iter().any(|v| !v.is_finite()) {
            return Err(LutError::NonFinite);
        }
        Ok(Self { dim, grid })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn flat_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dim + j) * self.dim + k
    }

    pub fn entry(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let b = self.flat_index(i, j, k) * 3;
        [self.grid[b], self.grid[b + 1], self.grid[b + 2]]
    }

    fn corners(&self, c: [f64; 3]) -> ([(usize, f64); 8], [f64; 3]) {
        let d = self.dim;
        let (k0, tr) = locate(clamp01(c[0]), d);
        let (j0, tg) = locate(clamp01(c[1]), d);
        let (i0, tb) = locate(clamp01(c[2]), d);
        let mut out = [(0usize, 0.0f64); 8];
        let mut n = 0;
        for (di, wb) in [(0, 1.0 - tb), (1, tb)] {
            for (dj, wg) in [(0, 1.0 - tg), (1, tg)] {
                for (dk, wr) in [(0, 1.0 - tr), (1, tr)] {
                    out[n] = (self.flat_index(i0 + di, j0 + dj, k0 + dk), wb * wg * wr);
                    n += 1;
                }
            }
        }
        (out, [tr, tg, tb])
    }

    /// Trilinear interpolation without output clamping.
    pub fn interpolate(&self, c: [f64; 3]) -> [f64; 3] {
        let (corners, _) = self.corners(c);
        let mut out = [0.0; 3];
        for (idx, w) in corners {
            if w == 0.0 {
                continue;
            }
            let b = idx * 3;
            out[0] += w * self.grid[b];
            out[1] += w * self.grid[b + 1];
            out[2] += w * self.grid[b + 2];
        }
        out
    }

    /// Trilinear lookup with the result clamped into `[0, 1]`.
    pub fn apply(&self, c: [f64; 3]) -> [f64; 3] {
        self.interpolate(c).map(clamp01)
    }

    /// Gradient of [`Lut3D::interpolate`] with respect to the grid and the input.
    ///
    /// Input components outside `[0, 1]` are clamped in the forward pass, so
    /// their derivative is zero.
    pub fn backward(&self, c: [f64; 3]) -> Lut3DGrad {
        let (corners, t) = self.corners(c);
        let scale = (self.dim - 1) as f64;
        let mut jacobian = [[0.0; 3]; 3];
        // Weight derivative: along axis `a`, corner offset 0 gets −1, offset 1 gets +1,
        // multiplied by the other two axes' weights.
        let mut n = 0;
        for di in 0..2 {
            for dj in 0..2 {
                for dk in 0..2 {
                    let idx = corners[n].0;
                    n += 1;
                    let wr = if dk == 0 { 1.0 - t[0] } else { t[0] };
                    let wg = if dj == 0 { 1.0 - t[1] } else { t[1] };
                    let wb = if di == 0 { 1.0 - t[2] } else { t[2] };
                    let sr = if dk == 0 { -1.0 } else { 1.0 };
                    let sg = if dj == 0 { -1.0 } else { 1.0 };
                    let sb = if di == 0 { -1.0 } else { 1.0 };
                    let dw = [sr * wg * wb, sg * wr * wb, sb * wr * wg];
                    let e = [self.grid[idx * 3], self.grid[idx * 3 + 1], self.grid[idx * 3 + 2]];
                    for (out, ev) in e.iter().enumerate() {
                        for axis in 0..3 {
                            jacobian[out][axis] += ev * dw[axis] * scale;
                        }
                    }
                }
            }
        }
        for (axis, v) in c.iter().enumerate() {
            if !(0.0..=1.0).contains(v) {
                for row in jacobian.iter_mut() {
                    row[axis] = 0.0;
                }
            }
        }
        Lut3DGrad { corners, jacobian }
    }
}

/// `K` learnable basis lattices fused by per-image weights.
///
/// Entries are stored in `f32` (they are trainable parameters persisted in
/// checkpoints); fusion and lookups run in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisLutBank {
    dim: usize,
    count: usize,
    data: Vec<f32>,
}

impl BasisLutBank {
    /// Basis 0 is the identity lattice, the rest are zero.
    pub fn new(dim: usize, count: usize) -> Result<Self, LutError> {
        if count == 0 {
            return Err(LutError::InvalidSize(count));
        }
        let id = Lut3D::identity(dim)?;
        let per = id.grid.len();
        let mut data = vec![0.0f32; per * count];
        for (dst, src) in data[..per].iter_mut().zip(&id.grid) {
            *dst = *src as f32;
        }
        Ok(Self { dim, count, data })
    }

    pub fn from_data(dim: usize, count: usize, data: Vec<f32>) -> Result<Self, LutError> {
        if dim < 2 {
            return Err(LutError::InvalidSize(dim));
        }
        if count == 0 {
            return Err(LutError::InvalidSize(count));
        }
        let expected = dim * dim * dim * 3 * count;
        if data.len() != expected {
            return Err(LutError::DimensionMismatch { expected, actual: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LutError::NonFinite);
        }
        Ok(Self { dim, count, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    fn per_basis(&self) -> usize {
        self.dim * self.dim * self.dim * 3
    }

    pub fn basis(&self, k: usize) -> Lut3D {
        let per = self.per_basis();
        Lut3D {
            dim: self.dim,
            grid: self.data[k * per..(k + 1) * per].iter().map(|&v| v as f64).collect(),
        }
    }

    /// `grid = Σ_k w_k · basis_k`, entry-wise.
    pub fn fuse(&self, weights: &[f64]) -> Result<Lut3D, LutError> {
        if weights.len() != self.count {
            return Err(LutError::DimensionMismatch { expected: self.count, actual: weights.len() });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(LutError::NonFinite);
        }
        let per = self.per_basis();
        let mut grid = vec![0.0f64; per];
        for (k, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (g, &b) in grid.iter_mut().zip(&self.data[k * per..(k + 1) * per]) {
                *g += w * b as f64;
            }
        }
        Ok(Lut3D { dim: self.dim, grid })
    }

    /// Back-propagates a dense gradient on the fused grid to the basis entries
    /// and the fusion weights. Returns `(grad_basis, grad_weights)`.
    pub fn fuse_backward(&self, weights: &[f64], grad_fused: &[f64]) -> Result<(Vec<f64>, Vec<f64>), LutError> {
        let per = self.per_basis();
        if weights.len() != self.count {
            return Err(LutError::DimensionMismatch { expected: self.count, actual: weights.len() });
        }
        if grad_fused.len() != per {
            return Err(LutError::DimensionMismatch { expected: per, actual: grad_fused.len() });
        }
        let mut grad_basis = vec![0.0f64; per * self.count];
        let mut grad_w = vec![0.0f64; self.count];
        for k in 0..self.count {
            let basis = &self.data[k * per..(k + 1) * per];
            let gb = &mut grad_basis[k * per..(k + 1) * per];
            let mut dot = 0.0;
            for ((g, &b), &gf) in gb.iter_mut().zip(basis).zip(grad_fused) {
                *g = weights[k] * gf;
                dot += b as f64 * gf;
            }
            grad_w[k] = dot;
        }
        Ok((grad_basis, grad_w))
    }
}

/// Smoothness and monotonicity regularizers with their gradients.
///
/// * smoothness: `Σ (e_next − e)²` over every adjacent lattice pair, along
///   every axis and for every output channel;
/// * monotonicity: `Σ max(0, e − e_next)` over adjacent pairs along each
///   output channel's own input axis (1D: along the entries).
pub trait Regularize {
    fn smoothness(&self) -> f64;
    fn smoothness_grad(&self) -> Vec<f64>;
    fn monotonicity(&self) -> f64;
    fn monotonicity_grad(&self) -> Vec<f64>;
}

fn pair_smooth(e: &[f64], stride: usize, count: usize, start: usize, acc: &mut f64, grad: Option<&mut [f64]>) {
    match grad {
        None => {
            for n in 0..count - 1 {
                let d = e[start + (n + 1) * stride] - e[start + n * stride];
                *acc += d * d;
            }
        }
        Some(g) => {
            for n in 0..count - 1 {
                let a = start + n * stride;
                let b = a + stride;
                let d = e[b] - e[a];
                g[b] += 2.0 * d;
                g[a] -= 2.0 * d;
            }
        }
    }
}

fn pair_mono(e: &[f64], stride: usize, count: usize, start: usize, acc: &mut f64, grad: Option<&mut [f64]>) {
    match grad {
        None => {
            for n in 0..count - 1 {
                let d = e[start + n * stride] - e[start + (n + 1) * stride];
                if d > 0.0 {
                    *acc += d;
                }
            }
        }
        Some(g) => {
            for n in 0..count - 1 {
                let a = start + n * stride;
                let b = a + stride;
                if e[a] > e[b] {
                    g[a] += 1.0;
                    g[b] -= 1.0;
                }
            }
        }
    }
}

impl Regularize for Lut1D {
    fn smoothness(&self) -> f64 {
        let mut acc = 0.0;
        pair_smooth(&self.entries, 1, self.entries.len(), 0, &mut acc, None);
        acc
    }

    fn smoothness_grad(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.entries.len()];
        pair_smooth(&self.entries, 1, self.entries.len(), 0, &mut 0.0, Some(&mut g));
        g
    }

    fn monotonicity(&self) -> f64 {
        let mut acc = 0.0;
        pair_mono(&self.entries, 1, self.entries.len(), 0, &mut acc, None);
        acc
    }

    fn monotonicity_grad(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.entries.len()];
        pair_mono(&self.entries, 1, self.entries.len(), 0, &mut 0.0, Some(&mut g));
        g
    }
}

/// Gradients are laid out flat as `[l.., a.., b..]`.
impl Regularize for Lut1DTriple {
    fn smoothness(&self) -> f64 {
        self.channels().iter().map(|c| c.smoothness()).sum()
    }

    fn smoothness_grad(&self) -> Vec<f64> {
        self.channels().iter().flat_map(|c| c.smoothness_grad()).collect()
    }

    fn monotonicity(&self) -> f64 {
        self.channels().iter().map(|c| c.monotonicity()).sum()
    }

    fn monotonicity_grad(&self) -> Vec<f64> {
        self.channels().iter().flat_map(|c| c.monotonicity_grad()).collect()
    }
}

impl Lut3D {
    /// Visits every (start, stride) line along `axis` (0 = red/k, 1 = green/j,
    /// 2 = blue/i) for output channel `ch`.
    fn for_each_line(&self, axis: usize, ch: usize, mut f: impl FnMut(usize, usize)) {
        let d = self.dim;
        let stride = match axis {
            0 => 3,
            1 => d * 3,
            _ => d * d * 3,
        };
        for u in 0..d {
            for v in 0..d {
                let (i, j, k) = match axis {
                    0 => (u, v, 0),
                    1 => (u, 0, v),
                    _ => (0, u, v),
                };
                f(self.flat_index(i, j, k) * 3 + ch, stride);
            }
        }
    }
}

impl Regularize for Lut3D {
    fn smoothness(&self) -> f64 {
        let mut acc = 0.0;
        for axis in 0..3 {
            for ch in 0..3 {
                self.for_each_line(axis, ch, |start, stride| {
                    pair_smooth(&self.grid, stride, self.dim, start, &mut acc, None)
                });
            }
        }
        acc
    }

    fn smoothness_grad(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.grid.len()];
        for axis in 0..3 {
            for ch in 0..3 {
                self.for_each_line(axis, ch, |start, stride| {
                    pair_smooth(&self.grid, stride, self.dim, start, &mut 0.0, Some(&mut g))
                });
            }
        }
        g
    }

    fn monotonicity(&self) -> f64 {
        let mut acc = 0.0;
        for ch in 0..3 {
            self.for_each_line(ch, ch, |start, stride| pair_mono(&self.grid, stride, self.dim, start, &mut acc, None));
        }
        acc
    }

    fn monotonicity_grad(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.grid.len()];
        for ch in 0..3 {
            self.for_each_line(ch, ch, |start, stride| {
                pair_mono(&self.grid, stride, self.dim, start, &mut 0.0, Some(&mut g))
            });
        }
        g
    }
}

/// Sums the regularizers over every basis lattice; gradients are laid out
/// like [`BasisLutBank::data`].
impl Regularize for BasisLutBank {
    fn smoothness(&self) -> f64 {
        (0..self.count).map(|k| self.basis(k).smoothness()).sum()
    }

    fn smoothness_grad(&self) -> Vec<f64> {
        (0..self.count).flat_map(|k| self.basis(k).smoothness_grad()).collect()
    }

    fn monotonicity(&self) -> f64 {
        (0..self.count).map(|k| self.basis(k).monotonicity()).sum()
    }

    fn monotonicity_grad(&self) -> Vec<f64> {
        (0..self.count).flat_map(|k| self.basis(k).monotonicity_grad()).collect()
    }
}

/// Squared L2 norm of the fusion weights; part of the smoothness term when a
/// fused transform is regularized.
pub fn fusion_weight_penalty(weights: &[f64]) -> f64 {
    weights.iter().map(|w| w * w).sum()
}

pub fn fusion_weight_penalty_grad(weights: &[f64]) -> Vec<f64> {
    weights.iter().map(|w| 2.0 * w).collect()
}
