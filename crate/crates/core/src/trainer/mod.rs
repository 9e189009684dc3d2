//! Dataset assembly, the training objective, the training loop, fine-tuning
//! and checkpoints.
//!
//! The objective for one `(raw, target, score, label)` sample is
//!
//! ```text
//! L = λr·MSE(T(raw), target) + λs·(smooth(1D) + smooth(3D) + ‖w‖²) + λm·(mono(1D) + mono(3D))
//! ```
//!
//! where `T` is the predicted transform and `w` the fusion weights. By default
//! `smooth` is taken of each LUT minus the identity LUT (see [`SmoothReference`]):
//! on the raw entries it is large for the identity and steadily pulls the
//! fused LUT toward a constant, which shows up as a color drift on colors
//! the training set never visits. During
//! training the reconstruction term uses the unclamped pipeline output.

use std::collections::HashMap;
use std::ops::{AddAssign, ControlFlow};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{
    backward, condition_resized, forward, Adam, AdamConfig, ArchitectureConfig, BackboneError, NetParams, Real,
    ResizedImage,
};
use crate::color::{load_png, ColorError, ImageBuffer};
use crate::lut::{fusion_weight_penalty, fusion_weight_penalty_grad, BasisLutBank, Lut1DTriple, Lut3D, LutError, Regularize};
use crate::pipeline::Transform;
use crate::skintone::{classify, mean_skin_color, SkinMask, SkinToneCenters, SkinToneError};

mod checkpoint;
mod perturb;
pub mod synthetic;

pub use checkpoint::{CheckpointError, ModelCheckpoint, TrainingMetadata, FORMAT_VERSION};
pub use perturb::{synth_perturb, LabDelta, PerturbMode, DELTA_LIMIT};

/// Identity pairs get scores drawn from this open interval.
pub const IDENTITY_SCORE_BOUND: f64 = 0.1;
const SHUFFLE_STREAM: u64 = 0x5eed_0f_5afe;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("image dimensions differ: {0}")]
    DimensionMismatch(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("score {0} outside [-1, 1]")]
    ScoreOutOfRange(f64),
    #[error("label {0} outside 1..=10")]
    LabelOutOfRange(u8),
    #[error("sample for '{0}' needs a skin mask (or an explicit label) when labels are enabled")]
    MissingMask(String),
    #[error("automatic labels need skin-tone centers")]
    MissingCenters,
    #[error("perturbation mode violation: {0}")]
    ModeViolation(String),
    #[error("Δ{axis} = {value} outside [-40, 40]")]
    DeltaOutOfRange { axis: &'static str, value: f64 },
    #[error("non-finite loss at epoch {epoch}, sample {sample}: {loss:?}")]
    NonFiniteLoss { epoch: usize, sample: usize, loss: LossBreakdown },
    #[error("checkpoint architecture does not match the configuration")]
    ArchitectureMismatch,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Lut(#[from] LutError),
    #[error(transparent)]
    Color(#[from] ColorError),
    #[error(transparent)]
    SkinTone(#[from] SkinToneError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("manifest: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// What the smoothness term measures adjacent differences of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothReference {
    /// The LUTs' deviation from identity, so identity LUTs cost nothing.
    #[default]
    Identity,
    /// The LUT entries themselves.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub recon: f64,
    pub smooth: f64,
    pub mono: f64,
    #[serde(default)]
    pub smooth_reference: SmoothReference,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { recon: 1.0, smooth: 1e-4, mono: 10.0, smooth_reference: SmoothReference::Identity }
    }
}

impl LossWeights {
    pub fn new(recon: f64, smooth: f64, mono: f64) -> Self {
        Self { recon, smooth, mono, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub loss: LossWeights,
    pub seed: u64,
    pub arch: ArchitectureConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            lr: 1e-4,
            batch_size: 1,
            loss: LossWeights::default(),
            seed: 0,
            arch: ArchitectureConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(TrainError::InvalidConfig(format!("learning rate {}", self.lr)));
        }
        if self.batch_size != 1 {
            return Err(TrainError::InvalidConfig("only batch size 1 is supported".into()));
        }
        let l = self.loss;
        if [l.recon, l.smooth, l.mono].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(TrainError::InvalidConfig("loss weights must be finite and non-negative".into()));
        }
        self.arch.validate()?;
        Ok(())
    }
}

/// One manifest row with its images loaded. Pairs sharing `raw_id` share the raw image.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub raw_id: String,
    pub raw: Arc<ImageBuffer>,
    pub target: Arc<ImageBuffer>,
    pub score: f64,
    pub label: Option<u8>,
    pub mask: Option<Arc<SkinMask>>,
}

/// A ready-to-train sample with its label resolved.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub raw: Arc<ImageBuffer>,
    pub target: Arc<ImageBuffer>,
    pub score: f64,
    pub label: Option<u8>,
    pub identity: bool,
}

impl TrainingSample {
    pub fn new(raw: Arc<ImageBuffer>, target: Arc<ImageBuffer>, score: f64, label: Option<u8>) -> Result<Self, TrainError> {
        if raw.width() != target.width() || raw.height() != target.height() {
            return Err(TrainError::DimensionMismatch(format!(
                "raw {}x{}, target {}x{}",
                raw.width(),
                raw.height(),
                target.width(),
                target.height()
            )));
        }
        if !(-1.0..=1.0).contains(&score) {
            return Err(TrainError::ScoreOutOfRange(score));
        }
        if let Some(l) = label {
            if !(1..=10).contains(&l) {
                return Err(TrainError::LabelOutOfRange(l));
            }
        }
        Ok(Self { raw, target, score, label, identity: false })
    }
}

fn resolve_label(
    pair: &TrainingPair,
    use_label: bool,
    centers: Option<&SkinToneCenters>,
) -> Result<Option<u8>, TrainError> {
    if !use_label {
        return Ok(None);
    }
    if let Some(l) = pair.label {
        return Ok(Some(l));
    }
    let mask = pair.mask.as_ref().ok_or_else(|| TrainError::MissingMask(pair.raw_id.clone()))?;
    let centers = centers.ok_or(TrainError::MissingCenters)?;
    Ok(Some(classify(mean_skin_color(&pair.raw, mask)?, centers)))
}

/// Resolves labels and appends one identity pair (target = raw, score drawn
/// uniformly from `(-0.1, 0.1)` with the run seed) per distinct raw image.
pub fn build_dataset(
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
    centers: Option<&SkinToneCenters>,
) -> Result<Vec<TrainingSample>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::with_capacity(pairs.len() * 2);
    let mut raws: Vec<(Arc<ImageBuffer>, Option<u8>)> = Vec::new();
    let mut seen: HashMap<&str, ()> = HashMap::new();
    for pair in pairs {
        let label = resolve_label(pair, cfg.arch.use_label, centers)?;
        samples.push(TrainingSample::new(pair.raw.clone(), pair.target.clone(), pair.score, label)?);
        if seen.insert(&pair.raw_id, ()).is_none() {
            raws.push((pair.raw.clone(), label));
        }
    }
    for (raw, label) in raws {
        let score = loop {
            let s = rng.random_range(-IDENTITY_SCORE_BOUND..IDENTITY_SCORE_BOUND);
            if s != -IDENTITY_SCORE_BOUND {
                break s;
            }
        };
        samples.push(TrainingSample { raw: raw.clone(), target: raw, score, label, identity: true });
    }
    Ok(samples)
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    raw_path: String,
    target_path: String,
    score: f64,
    #[serde(default)]
    label: Option<u8>,
    #[serde(default)]
    mask_path: Option<String>,
}

/// Reads a `raw_path,target_path,score,label,mask_path` manifest. Relative
/// paths are resolved against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<TrainingPair>, TrainError> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let resolve = |p: &str| -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut images: HashMap<PathBuf, Arc<ImageBuffer>> = HashMap::new();
    let mut masks: HashMap<PathBuf, Arc<SkinMask>> = HashMap::new();
    let mut load = |p: PathBuf| -> Result<Arc<ImageBuffer>, TrainError> {
        if let Some(img) = images.get(&p) {
            return Ok(img.clone());
        }
        let img = Arc::new(load_png(&p)?);
        images.insert(p, img.clone());
        Ok(img)
    };
    let mut pairs = Vec::new();
    for row in reader.deserialize() {
        let row: ManifestRow = row?;
        let mask = match row.mask_path.as_deref().filter(|m| !m.is_empty()) {
            Some(m) => {
                let p = resolve(m);
                let mask = match masks.get(&p) {
                    Some(mask) => mask.clone(),
                    None => {
                        let mask = Arc::new(SkinMask::load_png(&p)?);
                        masks.insert(p, mask.clone());
                        mask
                    }
                };
                Some(mask)
            }
            None => None,
        };
        pairs.push(TrainingPair {
            raw_id: row.raw_path.clone(),
            raw: load(resolve(&row.raw_path))?,
            target: load(resolve(&row.target_path))?,
            score: row.score,
            label: row.label,
            mask,
        });
    }
    Ok(pairs)
}

/// Unweighted loss terms and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub smooth: f64,
    pub mono: f64,
}

impl LossBreakdown {
    fn combine(w: &LossWeights, recon: f64, smooth: f64, mono: f64) -> Self {
        Self { total: w.recon * recon + w.smooth * smooth + w.mono * mono, recon, smooth, mono }
    }

    fn scaled(self, s: f64) -> Self {
        Self { total: self.total * s, recon: self.recon * s, smooth: self.smooth * s, mono: self.mono * s }
    }
}

impl AddAssign for LossBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.total += o.total;
        self.recon += o.recon;
        self.smooth += o.smooth;
        self.mono += o.mono;
    }
}

fn smooth_target_3d(lut: &Lut3D, r: SmoothReference) -> std::borrow::Cow<'_, Lut3D> {
    match r {
        SmoothReference::Identity => std::borrow::Cow::Owned(lut.deviation_from_identity()),
        SmoothReference::Absolute => std::borrow::Cow::Borrowed(lut),
    }
}

fn smooth_target_1d(luts: &Lut1DTriple, r: SmoothReference) -> std::borrow::Cow<'_, Lut1DTriple> {
    match r {
        SmoothReference::Identity => std::borrow::Cow::Owned(luts.deviation_from_identity()),
        SmoothReference::Absolute => std::borrow::Cow::Borrowed(luts),
    }
}

fn penalties(luts: Option<&Lut1DTriple>, fused: &Lut3D, weights: &[f64], r: SmoothReference) -> (f64, f64) {
    let mut smooth = smooth_target_3d(fused, r).smoothness() + fusion_weight_penalty(weights);
    let mut mono = fused.monotonicity();
    if let Some(l) = luts {
        smooth += smooth_target_1d(l, r).smoothness();
        mono += l.monotonicity();
    }
    (smooth, mono)
}

/// The objective on already-enhanced images.
pub fn total_loss(
    enhanced: &ImageBuffer,
    target: &ImageBuffer,
    luts: Option<&Lut1DTriple>,
    fused: &Lut3D,
    weights: &[f64],
    w: &LossWeights,
) -> Result<LossBreakdown, TrainError> {
    if enhanced.width() != target.width() || enhanced.height() != target.height() {
        return Err(TrainError::DimensionMismatch(format!(
            "enhanced {}x{}, target {}x{}",
            enhanced.width(),
            enhanced.height(),
            target.width(),
            target.height()
        )));
    }
    let sse: f64 = enhanced.data().iter().zip(target.data()).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
    let recon = sse / enhanced.data().len() as f64;
    let (smooth, mono) = penalties(luts, fused, weights, w.smooth_reference);
    Ok(LossBreakdown::combine(w, recon, smooth, mono))
}

/// Parameter gradients of one sample's objective.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub net: NetParams<T>,
    pub bank: Vec<f64>,
}

fn predict<T: Real>(
    params: &NetParams<T>,
    bank: &BasisLutBank,
    sample: &TrainingSample,
) -> Result<(Transform, Vec<f64>, crate::backbone::Tape<T>), TrainError> {
    let arch = params.arch();
    let resized = ResizedImage::new(&sample.raw, arch.input_size)?;
    let x = condition_resized::<T>(&resized, sample.score, sample.label, arch, false)?;
    let out = forward(params, &x)?;
    let fused = bank.fuse(&out.weights)?;
    Ok((Transform { luts: out.luts, lut3d: fused }, out.weights, out.tape))
}

/// The objective of one sample, without gradients.
pub fn sample_loss<T: Real>(
    params: &NetParams<T>,
    bank: &BasisLutBank,
    sample: &TrainingSample,
    w: &LossWeights,
) -> Result<LossBreakdown, TrainError> {
    let (t, weights, _) = predict(params, bank, sample)?;
    let mut sse = 0.0;
    for (p, q) in sample.raw.pixels().zip(sample.target.pixels()) {
        let (o, _) = t.trace_pixel(p.map(|v| v as f64));
        sse += (0..3).map(|c| (o[c] - q[c] as f64).powi(2)).sum::<f64>();
    }
    let recon = sse / sample.raw.data().len() as f64;
    let (smooth, mono) = penalties(t.luts.as_ref(), &t.lut3d, &weights, w.smooth_reference);
    Ok(LossBreakdown::combine(w, recon, smooth, mono))
}

/// The objective of one sample with gradients for every network parameter and basis entry.
pub fn sample_gradients<T: Real>(
    params: &NetParams<T>,
    bank: &BasisLutBank,
    sample: &TrainingSample,
    w: &LossWeights,
) -> Result<(LossBreakdown, Gradients<T>), TrainError> {
    let (t, weights, tape) = predict(params, bank, sample)?;
    let mut grad_luts = t.luts.as_ref().map(|l| vec![0.0; 3 * l.size()]);
    let mut grad_grid = vec![0.0; t.lut3d.grid().len()];
    let n = sample.raw.data().len() as f64;
    let scale = 2.0 * w.recon / n;
    let mut sse = 0.0;
    for (p, q) in sample.raw.pixels().zip(sample.target.pixels()) {
        let (o, trace) = t.trace_pixel(p.map(|v| v as f64));
        let d = [o[0] - q[0] as f64, o[1] - q[1] as f64, o[2] - q[2] as f64];
        sse += d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        if scale != 0.0 {
            t.backward_pixel(&trace, d.map(|v| v * scale), grad_luts.as_deref_mut(), &mut grad_grid);
        }
    }
    let recon = sse / n;
    let (smooth, mono) = penalties(t.luts.as_ref(), &t.lut3d, &weights, w.smooth_reference);

    let add = |dst: &mut [f64], src: Vec<f64>, s: f64| {
        for (d, v) in dst.iter_mut().zip(src) {
            *d += s * v;
        }
    };
    if w.smooth != 0.0 {
        add(&mut grad_grid, smooth_target_3d(&t.lut3d, w.smooth_reference).smoothness_grad(), w.smooth);
        if let (Some(g), Some(l)) = (grad_luts.as_deref_mut(), &t.luts) {
            add(g, smooth_target_1d(l, w.smooth_reference).smoothness_grad(), w.smooth);
        }
    }
    if w.mono != 0.0 {
        add(&mut grad_grid, t.lut3d.monotonicity_grad(), w.mono);
        if let (Some(g), Some(l)) = (grad_luts.as_deref_mut(), &t.luts) {
            add(g, l.monotonicity_grad(), w.mono);
        }
    }
    let (grad_bank, mut grad_w) = bank.fuse_backward(&weights, &grad_grid)?;
    add(&mut grad_w, fusion_weight_penalty_grad(&weights), w.smooth);
    let net = backward(params, &tape, grad_luts.as_deref(), &grad_w)?;
    Ok((LossBreakdown::combine(w, recon, smooth, mono), Gradients { net, bank: grad_bank }))
}

/// Mean objective over a dataset.
pub fn evaluate(model: &ModelCheckpoint, dataset: &[TrainingSample], w: &LossWeights) -> Result<LossBreakdown, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut acc = LossBreakdown::default();
    for s in dataset {
        acc += sample_loss(&model.params, &model.bank, s, w)?;
    }
    Ok(acc.scaled(1.0 / dataset.len() as f64))
}

/// Per-epoch log row. Epoch 0 is the model before any update; later rows are
/// means over the samples visited during that epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
}

/// Writes `epoch,total,lr_term,smooth_term,mono_term`.
pub fn write_loss_csv<W: std::io::Write>(curve: &[EpochLog], out: W) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "total", "lr_term", "smooth_term", "mono_term"])?;
    for e in curve {
        w.write_record([
            e.epoch.to_string(),
            format!("{:.9e}", e.loss.total),
            format!("{:.9e}", e.loss.recon),
            format!("{:.9e}", e.loss.smooth),
            format!("{:.9e}", e.loss.mono),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub curve: Vec<EpochLog>,
}

/// Called after epoch 0 and every epoch; return `Break` to stop early.
pub trait EpochObserver {
    fn on_epoch(&mut self, log: &EpochLog, model: &ModelCheckpoint) -> ControlFlow<()>;
}

impl<F: FnMut(&EpochLog, &ModelCheckpoint) -> ControlFlow<()>> EpochObserver for F {
    fn on_epoch(&mut self, log: &EpochLog, model: &ModelCheckpoint) -> ControlFlow<()> {
        self(log, model)
    }
}

/// Observer that never stops the run.
pub fn no_observer(_: &EpochLog, _: &ModelCheckpoint) -> ControlFlow<()> {
    ControlFlow::Continue(())
}

fn run_epochs(
    model: &mut ModelCheckpoint,
    dataset: &[TrainingSample],
    cfg: &TrainConfig,
    observer: &mut dyn EpochObserver,
) -> Result<Vec<EpochLog>, TrainError> {
    let mut curve = vec![EpochLog { epoch: 0, loss: evaluate(model, dataset, &cfg.loss)? }];
    if observer.on_epoch(&curve[0], model).is_break() {
        return Ok(curve);
    }
    let mut shapes = model.params.shapes();
    shapes.push(model.bank.data().len());
    let mut adam = Adam::<f32>::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossBreakdown::default();
        for &i in &order {
            let (loss, grads) = sample_gradients(&model.params, &model.bank, &dataset[i], &cfg.loss)?;
            if !loss.total.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, sample: i, loss });
            }
            acc += loss;
            let bank_grad: Vec<f32> = grads.bank.iter().map(|&v| v as f32).collect();
            let mut params = model.params.tensors_mut();
            params.push(model.bank.data_mut());
            let mut g = grads.net.tensors();
            g.push(&bank_grad);
            adam.step(&mut params, &g)?;
        }
        let log = EpochLog { epoch, loss: acc.scaled(1.0 / dataset.len() as f64) };
        log::debug!("epoch {epoch}: total {:.6e} recon {:.6e}", log.loss.total, log.loss.recon);
        curve.push(log);
        model.meta.final_loss = Some(log.loss.total);
        if observer.on_epoch(&log, model).is_break() {
            break;
        }
    }
    Ok(curve)
}

/// Trains a fresh model from `cfg.seed`.
pub fn train(
    dataset: &[TrainingSample],
    cfg: &TrainConfig,
    observer: &mut dyn EpochObserver,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut model = ModelCheckpoint::init(&cfg.arch, cfg.seed)?;
    let curve = run_epochs(&mut model, dataset, cfg, observer)?;
    model.meta.epochs_completed = curve.len() - 1;
    Ok(TrainOutcome { checkpoint: model, curve })
}

/// Continues training `checkpoint` on `dataset` with a fresh optimizer.
pub fn finetune(
    checkpoint: &ModelCheckpoint,
    dataset: &[TrainingSample],
    cfg: &TrainConfig,
    observer: &mut dyn EpochObserver,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if checkpoint.arch() != &cfg.arch {
        return Err(TrainError::ArchitectureMismatch);
    }
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut model = checkpoint.clone();
    let curve = run_epochs(&mut model, dataset, cfg, observer)?;
    model.meta.finetune_epochs += curve.len() - 1;
    Ok(TrainOutcome { checkpoint: model, curve })
}
