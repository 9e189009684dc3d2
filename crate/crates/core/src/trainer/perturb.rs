//! Synthetic CIELAB perturbations: shift every pixel's Lab value by a fixed
//! delta and re-encode to sRGB.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::color::{lab_to_srgb, srgb_to_lab, ColorSpace, ImageBuffer, LabPixel, RgbPixel};

pub const DELTA_LIMIT: f64 = 40.0;

/// Skin-tone data keeps `L` fixed; natural images may shift all three axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    #[default]
    SkinTone,
    Natural,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabDelta {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl LabDelta {
    /// Uniform draw from `[-40, 40]` per axis (`l` stays 0 in skin-tone mode).
    pub fn random(rng: &mut impl Rng, mode: PerturbMode) -> Self {
        let mut d = || rng.random_range(-DELTA_LIMIT..=DELTA_LIMIT);
        let a = d();
        let b = d();
        let l = match mode {
            PerturbMode::SkinTone => 0.0,
            PerturbMode::Natural => d(),
        };
        Self { l, a, b }
    }

    pub fn seeded(seed: u64, mode: PerturbMode) -> Self {
        Self::random(&mut ChaCha8Rng::seed_from_u64(seed), mode)
    }
}

pub fn synth_perturb(img: &ImageBuffer, delta: LabDelta, mode: PerturbMode) -> Result<ImageBuffer, TrainError> {
    for (axis, v) in [("L", delta.l), ("a", delta.a), ("b", delta.b)] {
        if !v.is_finite() || v.abs() > DELTA_LIMIT {
            return Err(TrainError::DeltaOutOfRange { axis, value: v });
        }
    }
    if mode == PerturbMode::SkinTone && delta.l != 0.0 {
        return Err(TrainError::ModeViolation(format!(
            "skin-tone perturbations keep L unchanged, got ΔL = {}",
            delta.l
        )));
    }
    if img.space() != ColorSpace::Srgb {
        return Err(TrainError::InvalidImage("perturbation expects an sRGB image".into()));
    }
    Ok(img.map_pixels(ColorSpace::Srgb, |p| {
        let lab = srgb_to_lab(RgbPixel::from_array(p));
        lab_to_srgb(LabPixel::new(lab.l + delta.l, lab.a + delta.a, lab.b + delta.b)).to_array()
    }))
}
