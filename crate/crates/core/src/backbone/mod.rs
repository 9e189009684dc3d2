//! Score/label-conditioned context encoder and the two LUT generator heads.
//!
//! ```text
//! [image ⊕ score plane ⊕ label plane]  (C×N×N, N = input_size)
//!   → 5 × { conv 3×3 stride 2 → leaky ReLU(0.2) → instance norm + affine }   (no norm on layer 5)
//!   → global average pool                                              = F
//! F → fc → leaky → fc → 3·S residuals   (+ identity)                   = 1D LUTs
//! F → fc → leaky → fc → K fusion weights                               = basis weights
//! ```
//!
//! Reverse mode is hand-written; [`forward`] records a [`Tape`] that
//! [`backward`] replays. Everything is generic over [`Real`] so the same code
//! runs in `f32` for training and in `f64` for gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::color::{ColorSpace, ImageBuffer};
use crate::lut::{Lut1DTriple, LutError};

mod adam;
pub mod ops;

pub use adam::{Adam, AdamConfig};
pub use ops::Real;
use ops::{
    col2im, conv_out_size, gemm, im2col, instance_norm, instance_norm_backward, leaky, leaky_grad,
    resize_bilinear_planar,
};

pub const LAYER_COUNT: usize = 5;
pub const NORMALIZED_LAYERS: usize = 4;
pub const MAX_LABEL: u8 = 10;

#[derive(Debug, Error, PartialEq)]
pub enum BackboneError {
    #[error("score {0} outside [-1, 1]")]
    ScoreOutOfRange(f64),
    #[error("label {0} outside 1..=10")]
    LabelOutOfRange(u8),
    #[error("a skin-tone label is required by this architecture")]
    MissingLabel,
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("tape was recorded for parameter generation {tape}, parameters are at {params}")]
    StaleTape { tape: u64, params: u64 },
    #[error(transparent)]
    Lut(#[from] LutError),
}

/// How the canonical score in `[-1, 1]` is written into the score plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreEncoding {
    /// `[-1, 1]` as is.
    #[default]
    Symmetric,
    /// Affinely mapped to `[0, 1]`.
    Unit,
    /// Scaled to `[-5, 5]`.
    Wide,
}

impl ScoreEncoding {
    pub fn encode(self, score: f64) -> f64 {
        match self {
            ScoreEncoding::Symmetric => score,
            ScoreEncoding::Unit => (score + 1.0) / 2.0,
            ScoreEncoding::Wide => score * 5.0,
        }
    }
}

/// How the skin-tone label `1..=10` is written into the label plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelEncoding {
    /// The integer label itself.
    #[default]
    Index,
    /// `(label − 1) / 9`, i.e. `[0, 1]`.
    Unit,
}

impl LabelEncoding {
    pub fn encode(self, label: u8) -> f64 {
        match self {
            LabelEncoding::Index => label as f64,
            LabelEncoding::Unit => (label as f64 - 1.0) / (MAX_LABEL as f64 - 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    /// Side of the square the image is resampled to before the encoder.
    pub input_size: usize,
    pub widths: [usize; LAYER_COUNT],
    pub head_hidden: usize,
    /// Skin-tone label plane on/off (off = 4-channel natural-image mode).
    pub use_label: bool,
    pub use_1d_luts: bool,
    pub lut1d_size: usize,
    pub lut3d_dim: usize,
    pub basis_count: usize,
    #[serde(default)]
    pub score_encoding: ScoreEncoding,
    #[serde(default)]
    pub label_encoding: LabelEncoding,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            widths: [16, 32, 64, 128, 128],
            head_hidden: 128,
            use_label: true,
            use_1d_luts: true,
            lut1d_size: 33,
            lut3d_dim: 33,
            basis_count: 3,
            score_encoding: ScoreEncoding::Symmetric,
            label_encoding: LabelEncoding::Index,
        }
    }
}

impl ArchitectureConfig {
    pub fn in_channels(&self) -> usize {
        if self.use_label {
            5
        } else {
            4
        }
    }

    pub fn feature_len(&self) -> usize {
        self.widths[LAYER_COUNT - 1]
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        if self.input_size == 0 || self.widths.contains(&0) || self.head_hidden == 0 || self.basis_count == 0 {
            return Err(BackboneError::ShapeMismatch("zero-sized layer in architecture".into()));
        }
        if self.lut1d_size < 2 || self.lut3d_dim < 2 {
            return Err(BackboneError::ShapeMismatch("LUT sizes must be at least 2".into()));
        }
        Ok(())
    }
}

/// The image part of a conditioned input, resampled once and reusable across scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ResizedImage {
    size: usize,
    planes: Vec<f32>,
}

impl ResizedImage {
    pub fn new(image: &ImageBuffer, size: usize) -> Result<Self, BackboneError> {
        if image.space() != ColorSpace::Srgb {
            return Err(BackboneError::InvalidImage("encoder expects an sRGB image".into()));
        }
        if size == 0 {
            return Err(BackboneError::ShapeMismatch("input size must be positive".into()));
        }
        Ok(Self {
            size,
            planes: resize_bilinear_planar(image.data(), image.width(), image.height(), size),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn planes(&self) -> &[f32] {
        &self.planes
    }
}

/// `C×N×N` encoder input: three image planes followed by constant score and
/// (optionally) label planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedInput<T> {
    channels: usize,
    size: usize,
    planes: Vec<T>,
}

impl<T: Real> ConditionedInput<T> {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn planes(&self) -> &[T] {
        &self.planes
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.size * self.size;
        &self.planes[c * n..(c + 1) * n]
    }
}

/// Resamples `image` and broadcasts score and label. `score` must lie in `[-1, 1]`.
pub fn condition<T: Real>(
    image: &ImageBuffer,
    score: f64,
    label: Option<u8>,
    arch: &ArchitectureConfig,
) -> Result<ConditionedInput<T>, BackboneError> {
    let resized = ResizedImage::new(image, arch.input_size)?;
    condition_resized(&resized, score, label, arch, false)
}

/// Like [`condition`] on an already resampled image. With `allow_extended`,
/// finite scores outside `[-1, 1]` are accepted.
pub fn condition_resized<T: Real>(
    image: &ResizedImage,
    score: f64,
    label: Option<u8>,
    arch: &ArchitectureConfig,
    allow_extended: bool,
) -> Result<ConditionedInput<T>, BackboneError> {
    if !score.is_finite() || (!allow_extended && !(-1.0..=1.0).contains(&score)) {
        return Err(BackboneError::ScoreOutOfRange(score));
    }
    if image.size != arch.input_size {
        return Err(BackboneError::ShapeMismatch(format!(
            "image resampled to {}, architecture expects {}",
            image.size, arch.input_size
        )));
    }
    let label_value = if arch.use_label {
        let l = label.ok_or(BackboneError::MissingLabel)?;
        if !(1..=MAX_LABEL).contains(&l) {
            return Err(BackboneError::LabelOutOfRange(l));
        }
        Some(arch.label_encoding.encode(l))
    } else {
        None
    };
    let n = image.size * image.size;
    let channels = arch.in_channels();
    let mut planes = Vec::with_capacity(channels * n);
    planes.extend(image.planes.iter().map(|&v| T::from_f64(v as f64)));
    planes.extend(std::iter::repeat_n(T::from_f64(arch.score_encoding.encode(score)), n));
    if let Some(lv) = label_value {
        planes.extend(std::iter::repeat_n(T::from_f64(lv), n));
    }
    Ok(ConditionedInput { channels, size: image.size, planes })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    /// `[out, in·9]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub in_ch: usize,
    pub out_ch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormAffine<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Two affine layers with a leaky ReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    /// `[hidden, in]`
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    /// `[out, hidden]`
    pub w2: Vec<T>,
    pub b2: Vec<T>,
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

#[derive(Debug, Clone)]
pub struct NetParams<T> {
    arch: ArchitectureConfig,
    pub convs: Vec<Conv<T>>,
    pub norms: Vec<NormAffine<T>>,
    pub head1d: Option<Mlp<T>>,
    pub head3d: Mlp<T>,
    generation: u64,
}

/// Compares architecture and values; the tape generation counter is bookkeeping.
impl<T: PartialEq> PartialEq for NetParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.convs == other.convs
            && self.norms == other.norms
            && self.head1d == other.head1d
            && self.head3d == other.head3d
    }
}

fn kaiming_uniform<T: Real>(rng: &mut ChaCha8Rng, fan_in: usize, count: usize) -> Vec<T> {
    let gain = (2.0 / (1.0 + ops::LEAKY_SLOPE * ops::LEAKY_SLOPE)).sqrt();
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    (0..count).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect()
}

impl<T: Real> NetParams<T> {
    /// Initial parameters: Kaiming-uniform convolutions and hidden layers, a
    /// zero 1D residual head, and a fusion head whose output is exactly
    /// `(1, 0, …, 0)` on the identity basis row.
    pub fn init(arch: &ArchitectureConfig, seed: u64) -> Result<Self, BackboneError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::with_capacity(LAYER_COUNT);
        let mut in_ch = arch.in_channels();
        for &out_ch in &arch.widths {
            convs.push(Conv {
                weight: kaiming_uniform(&mut rng, in_ch * 9, out_ch * in_ch * 9),
                bias: vec![T::zero(); out_ch],
                in_ch,
                out_ch,
            });
            in_ch = out_ch;
        }
        let norms = arch.widths[..NORMALIZED_LAYERS]
            .iter()
            .map(|&c| NormAffine { gamma: vec![T::one(); c], beta: vec![T::zero(); c] })
            .collect();
        let f = arch.feature_len();
        let h = arch.head_hidden;
        let head1d = arch.use_1d_luts.then(|| Mlp {
            w1: kaiming_uniform(&mut rng, f, h * f),
            b1: vec![T::zero(); h],
            w2: vec![T::zero(); 3 * arch.lut1d_size * h],
            b2: vec![T::zero(); 3 * arch.lut1d_size],
            input: f,
            hidden: h,
            output: 3 * arch.lut1d_size,
        });
        let k = arch.basis_count;
        let bound = 1.0 / (h as f64).sqrt();
        let mut w2 = vec![T::zero(); k * h];
        for v in w2.iter_mut().skip(h) {
            *v = T::from_f64(rng.random_range(-bound..bound));
        }
        let mut b2 = vec![T::zero(); k];
        b2[0] = T::one();
        let head3d = Mlp { w1: kaiming_uniform(&mut rng, f, h * f), b1: vec![T::zero(); h], w2, b2, input: f, hidden: h, output: k };
        Ok(Self { arch: arch.clone(), convs, norms, head1d, head3d, generation: 0 })
    }

    /// A parameter set of the same shape with every value zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.iter_mut().for_each(|v| *v = T::zero());
        }
        z.generation = 0;
        z
    }

    pub fn arch(&self) -> &ArchitectureConfig {
        &self.arch
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Tensor names in the fixed order used by [`NetParams::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.convs.len() {
            names.push(format!("conv{i}.weight"));
            names.push(format!("conv{i}.bias"));
        }
        for i in 0..self.norms.len() {
            names.push(format!("norm{i}.gamma"));
            names.push(format!("norm{i}.beta"));
        }
        let mut head = |p: &str| {
            for t in ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"] {
                names.push(format!("{p}.{t}"));
            }
        };
        if self.head1d.is_some() {
            head("head1d");
        }
        head("head3d");
        names
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for c in &self.convs {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        for n in &self.norms {
            out.push(&n.gamma);
            out.push(&n.beta);
        }
        for m in self.head1d.iter().chain(std::iter::once(&self.head3d)) {
            out.extend([&m.w1[..], &m.b1[..], &m.w2[..], &m.b2[..]]);
        }
        out
    }

    /// Mutable access to every tensor. Invalidates outstanding tapes.
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.generation += 1;
        let mut out: Vec<&mut [T]> = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for n in &mut self.norms {
            out.push(&mut n.gamma);
            out.push(&mut n.beta);
        }
        for m in self.head1d.iter_mut().chain(std::iter::once(&mut self.head3d)) {
            out.push(&mut m.w1);
            out.push(&mut m.b1);
            out.push(&mut m.w2);
            out.push(&mut m.b2);
        }
        out
    }

    pub fn shapes(&self) -> Vec<usize> {
        self.tensors().iter().map(|t| t.len()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.shapes().iter().sum()
    }

    /// Rebuilds parameters of architecture `arch` from flat tensors in
    /// [`NetParams::tensors`] order.
    pub fn from_tensors(arch: &ArchitectureConfig, tensors: Vec<Vec<T>>) -> Result<Self, BackboneError> {
        let mut template = Self::init(arch, 0)?;
        let shapes = template.shapes();
        if shapes.len() != tensors.len() {
            return Err(BackboneError::ShapeMismatch(format!(
                "expected {} tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (i, (dst, src)) in template.tensors_mut().into_iter().zip(&tensors).enumerate() {
            if dst.len() != src.len() {
                return Err(BackboneError::ShapeMismatch(format!(
                    "tensor {i}: expected {} values, got {}",
                    dst.len(),
                    src.len()
                )));
            }
            dst.copy_from_slice(src);
        }
        template.generation = 0;
        Ok(template)
    }

    /// Converts to another float type (used to run gradient checks in `f64`).
    pub fn cast<U: Real>(&self) -> NetParams<U> {
        let tensors = self.tensors().iter().map(|t| t.iter().map(|v| U::from_f64(v.as_f64())).collect()).collect();
        NetParams::from_tensors(&self.arch, tensors).expect("same architecture")
    }
}

#[derive(Debug, Clone)]
struct LayerTape<T> {
    in_h: usize,
    in_w: usize,
    cols: Vec<T>,
    pre: Vec<T>,
    xhat: Option<(Vec<T>, Vec<T>)>,
}

#[derive(Debug, Clone)]
struct HeadTape<T> {
    hidden_pre: Vec<T>,
    hidden: Vec<T>,
}

/// Intermediates recorded by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct Tape<T> {
    generation: u64,
    layers: Vec<LayerTape<T>>,
    last_hw: usize,
    feature: Vec<T>,
    head1d: Option<HeadTape<T>>,
    head3d: HeadTape<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub feature: Vec<T>,
    pub luts: Option<Lut1DTriple>,
    pub weights: Vec<f64>,
    pub tape: Tape<T>,
}

fn mlp_forward<T: Real>(m: &Mlp<T>, x: &[T]) -> (Vec<T>, HeadTape<T>) {
    let mut pre = m.b1.clone();
    gemm(m.hidden, m.input, 1, &m.w1, false, x, false, &mut pre, T::one());
    let hidden: Vec<T> = pre.iter().map(|&v| leaky(v)).collect();
    let mut out = m.b2.clone();
    gemm(m.output, m.hidden, 1, &m.w2, false, &hidden, false, &mut out, T::one());
    (out, HeadTape { hidden_pre: pre, hidden })
}

/// Accumulates parameter gradients into `g` and returns `d loss / d x`.
fn mlp_backward<T: Real>(m: &Mlp<T>, tape: &HeadTape<T>, x: &[T], dout: &[T], g: &mut Mlp<T>) -> Vec<T> {
    for (o, &d) in dout.iter().enumerate() {
        g.b2[o] += d;
        let row = &mut g.w2[o * m.hidden..(o + 1) * m.hidden];
        for (w, &h) in row.iter_mut().zip(&tape.hidden) {
            *w += d * h;
        }
    }
    let mut dh = vec![T::zero(); m.hidden];
    gemm(m.hidden, m.output, 1, &m.w2, true, dout, false, &mut dh, T::zero());
    for (d, &p) in dh.iter_mut().zip(&tape.hidden_pre) {
        *d *= leaky_grad(p);
    }
    for (h, &d) in dh.iter().enumerate() {
        g.b1[h] += d;
        let row = &mut g.w1[h * m.input..(h + 1) * m.input];
        for (w, &xv) in row.iter_mut().zip(x) {
            *w += d * xv;
        }
    }
    let mut dx = vec![T::zero(); m.input];
    gemm(m.input, m.hidden, 1, &m.w1, true, &dh, false, &mut dx, T::zero());
    dx
}

pub fn forward<T: Real>(params: &NetParams<T>, x: &ConditionedInput<T>) -> Result<ForwardOutput<T>, BackboneError> {
    let arch = &params.arch;
    if x.channels != arch.in_channels() || x.size != arch.input_size {
        return Err(BackboneError::ShapeMismatch(format!(
            "input {}×{}×{} does not match architecture {}×{}×{}",
            x.channels,
            x.size,
            x.size,
            arch.in_channels(),
            arch.input_size,
            arch.input_size
        )));
    }
    let mut act = x.planes.clone();
    let (mut h, mut w) = (x.size, x.size);
    let mut layers = Vec::with_capacity(LAYER_COUNT);
    for (li, conv) in params.convs.iter().enumerate() {
        let mut cols = Vec::new();
        im2col(&act, conv.in_ch, h, w, &mut cols);
        let (ho, wo) = (conv_out_size(h), conv_out_size(w));
        let hw = ho * wo;
        let mut pre = vec![T::zero(); conv.out_ch * hw];
        for (o, row) in pre.chunks_exact_mut(hw).enumerate() {
            row.iter_mut().for_each(|v| *v = conv.bias[o]);
        }
        gemm(conv.out_ch, conv.in_ch * 9, hw, &conv.weight, false, &cols, false, &mut pre, T::one());
        let mut out: Vec<T> = pre.iter().map(|&v| leaky(v)).collect();
        let xhat = if li < NORMALIZED_LAYERS {
            let (xh, inv_std) = instance_norm(&out, conv.out_ch, hw);
            let norm = &params.norms[li];
            for (c, (orow, xrow)) in out.chunks_exact_mut(hw).zip(xh.chunks_exact(hw)).enumerate() {
                for (o, &v) in orow.iter_mut().zip(xrow) {
                    *o = norm.gamma[c] * v + norm.beta[c];
                }
            }
            Some((xh, inv_std))
        } else {
            None
        };
        layers.push(LayerTape { in_h: h, in_w: w, cols, pre, xhat });
        act = out;
        h = ho;
        w = wo;
    }
    let hw = h * w;
    let c_last = arch.feature_len();
    let inv = 1.0 / hw as f64;
    let feature: Vec<T> = act
        .chunks_exact(hw)
        .map(|row| T::from_f64(row.iter().map(|v| v.as_f64()).sum::<f64>() * inv))
        .collect();
    debug_assert_eq!(feature.len(), c_last);

    let (luts, head1d_tape) = match &params.head1d {
        Some(m) => {
            let (res, tape) = mlp_forward(m, &feature);
            let s = arch.lut1d_size;
            let scale = (s - 1) as f64;
            let flat: Vec<f64> = res.iter().enumerate().map(|(i, r)| (i % s) as f64 / scale + r.as_f64()).collect();
            (Some(Lut1DTriple::from_flat(&flat)?), Some(tape))
        }
        None => (None, None),
    };
    let (wout, head3d_tape) = mlp_forward(&params.head3d, &feature);
    let weights: Vec<f64> = wout.iter().map(|v| v.as_f64()).collect();
    Ok(ForwardOutput {
        feature: feature.clone(),
        luts,
        weights,
        tape: Tape {
            generation: params.generation,
            layers,
            last_hw: hw,
            feature,
            head1d: head1d_tape,
            head3d: head3d_tape,
        },
    })
}

/// Reverse pass. `grad_luts` is `d loss / d entries` in `[l.., a.., b..]`
/// order (required when the architecture has 1D LUTs); `grad_weights` is
/// `d loss / d fusion weights`.
pub fn backward<T: Real>(
    params: &NetParams<T>,
    tape: &Tape<T>,
    grad_luts: Option<&[f64]>,
    grad_weights: &[f64],
) -> Result<NetParams<T>, BackboneError> {
    if tape.generation != params.generation {
        return Err(BackboneError::StaleTape { tape: tape.generation, params: params.generation });
    }
    let arch = &params.arch;
    if grad_weights.len() != arch.basis_count {
        return Err(BackboneError::ShapeMismatch(format!(
            "expected {} weight gradients, got {}",
            arch.basis_count,
            grad_weights.len()
        )));
    }
    let mut grads = params.zeros_like();
    grads.generation = 0;

    let dw: Vec<T> = grad_weights.iter().map(|&v| T::from_f64(v)).collect();
    let mut dfeature = mlp_backward(&params.head3d, &tape.head3d, &tape.feature, &dw, &mut grads.head3d);
    match (&params.head1d, &tape.head1d, grad_luts) {
        (Some(m), Some(ht), Some(gl)) => {
            if gl.len() != m.output {
                return Err(BackboneError::ShapeMismatch(format!(
                    "expected {} LUT gradients, got {}",
                    m.output,
                    gl.len()
                )));
            }
            let dl: Vec<T> = gl.iter().map(|&v| T::from_f64(v)).collect();
            let g1 = grads.head1d.as_mut().expect("same architecture");
            let df = mlp_backward(m, ht, &tape.feature, &dl, g1);
            for (a, b) in dfeature.iter_mut().zip(df) {
                *a += b;
            }
        }
        (Some(_), _, None) => return Err(BackboneError::ShapeMismatch("missing 1D LUT gradient".into())),
        _ => {}
    }

    // Global average pool.
    let hw = tape.last_hw;
    let inv = T::from_f64(1.0 / hw as f64);
    let mut dact: Vec<T> = dfeature.iter().flat_map(|&d| std::iter::repeat_n(d * inv, hw)).collect();

    for li in (0..params.convs.len()).rev() {
        let conv = &params.convs[li];
        let lt = &tape.layers[li];
        let (ho, wo) = (conv_out_size(lt.in_h), conv_out_size(lt.in_w));
        let hw = ho * wo;
        let mut dpre = if let Some((xhat, inv_std)) = &lt.xhat {
            let norm = &params.norms[li];
            let gnorm = &mut grads.norms[li];
            let mut dxhat = vec![T::zero(); conv.out_ch * hw];
            for c in 0..conv.out_ch {
                let dy = &dact[c * hw..(c + 1) * hw];
                let xh = &xhat[c * hw..(c + 1) * hw];
                let mut dg = T::zero();
                let mut db = T::zero();
                for ((d, &g), &x) in dxhat[c * hw..(c + 1) * hw].iter_mut().zip(dy).zip(xh) {
                    dg += g * x;
                    db += g;
                    *d = g * norm.gamma[c];
                }
                gnorm.gamma[c] += dg;
                gnorm.beta[c] += db;
            }
            instance_norm_backward(&dxhat, xhat, inv_std, conv.out_ch, hw)
        } else {
            dact
        };
        for (d, &p) in dpre.iter_mut().zip(&lt.pre) {
            *d *= leaky_grad(p);
        }
        let gconv = &mut grads.convs[li];
        for (o, row) in dpre.chunks_exact(hw).enumerate() {
            gconv.bias[o] += row.iter().copied().sum();
        }
        let k = conv.in_ch * 9;
        gemm(conv.out_ch, hw, k, &dpre, false, &lt.cols, true, &mut gconv.weight, T::one());
        if li == 0 {
            break;
        }
        let mut dcols = vec![T::zero(); k * hw];
        gemm(k, conv.out_ch, hw, &conv.weight, true, &dpre, false, &mut dcols, T::zero());
        dact = col2im(&dcols, conv.in_ch, lt.in_h, lt.in_w);
    }
    Ok(grads)
}
