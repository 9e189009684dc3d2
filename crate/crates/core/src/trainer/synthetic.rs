//! Procedural portraits and perturbation fixtures for smoke tests, demos and
//! the acceptance suite.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{synth_perturb, LabDelta, PerturbMode, TrainError, TrainingPair};
use crate::color::{lab_to_srgb, ColorSpace, ImageBuffer, LabPixel};
use crate::skintone::SkinMask;

/// Lab-b shifts of the standard fixture: −20, −15, …, +20.
pub const B_SHIFTS: [f64; 9] = [-20.0, -15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0];

/// The fixed monotone map from a b-shift to a guiding score.
pub fn score_for_shift(delta_b: f64) -> f64 {
    (delta_b / 20.0).clamp(-1.0, 1.0)
}

/// A `size×size` portrait-like image: a two-color background gradient, an
/// elliptical skin-toned face with soft shading and a saturated garment band.
/// `skin_l` picks the face lightness (the skin-tone cluster).
pub fn portrait(seed: u64, size: usize, skin_l: f64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg0 = LabPixel::new(rng.random_range(30.0..85.0), rng.random_range(-25.0..25.0), rng.random_range(-25.0..25.0));
    let bg1 = LabPixel::new(rng.random_range(30.0..85.0), rng.random_range(-25.0..25.0), rng.random_range(-25.0..25.0));
    let skin_a = rng.random_range(8.0..18.0);
    let skin_b = rng.random_range(12.0..26.0);
    let cloth = LabPixel::new(rng.random_range(25.0..70.0), rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
    let (cx, cy) = (0.5 + rng.random_range(-0.06..0.06), 0.45 + rng.random_range(-0.05..0.05));
    let (rx, ry) = (rng.random_range(0.20..0.26), rng.random_range(0.26..0.32));
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let s = size as f64;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
            let texture = 2.0 * ((u * 23.0 + phase).sin() * (v * 19.0 - phase).cos());
            let t = (u + v) / 2.0;
            let mut lab = LabPixel::new(
                bg0.l * (1.0 - t) + bg1.l * t + texture,
                bg0.a * (1.0 - t) + bg1.a * t,
                bg0.b * (1.0 - t) + bg1.b * t,
            );
            if v > 0.8 {
                lab = LabPixel::new(cloth.l + texture, cloth.a, cloth.b);
            }
            let d = ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2);
            if d < 1.0 {
                let shade = 8.0 * (0.5 - d) + 4.0 * (u - cx);
                lab = LabPixel::new(skin_l + shade + 0.5 * texture, skin_a + 2.0 * d, skin_b - 2.0 * d);
            }
            data.extend(lab_to_srgb(lab).to_array().map(|c| c as f32));
        }
    }
    ImageBuffer::new(size, size, ColorSpace::Srgb, data).expect("valid synthetic image")
}

/// The face region of [`portrait`] is roughly centered; the central window is a usable mask.
pub fn portrait_mask(size: usize) -> SkinMask {
    SkinMask::central(size, size)
}

/// One pair per `(raw, shift)`: target = raw with its Lab b shifted, score from [`score_for_shift`].
pub fn b_shift_pairs(
    raws: &[(String, Arc<ImageBuffer>)],
    shifts: &[f64],
    label: Option<u8>,
) -> Result<Vec<TrainingPair>, TrainError> {
    let mut pairs = Vec::with_capacity(raws.len() * shifts.len());
    for (id, raw) in raws {
        let mask = Arc::new(SkinMask::central(raw.width(), raw.height()));
        for &db in shifts {
            let target = synth_perturb(raw, LabDelta { l: 0.0, a: 0.0, b: db }, PerturbMode::SkinTone)?;
            pairs.push(TrainingPair {
                raw_id: id.clone(),
                raw: raw.clone(),
                target: Arc::new(target),
                score: score_for_shift(db),
                label,
                mask: Some(mask.clone()),
            });
        }
    }
    Ok(pairs)
}
