//! Inference: score- and label-conditioned enhancement at full resolution.

use std::path::PathBuf;

use thiserror::Error;

use crate::backbone::BackboneError;
use crate::color::{convert_image, ColorSpace, ImageBuffer};
use crate::skintone::{classify, mean_skin_color, SkinMask, SkinToneCenters, SkinToneError};
use crate::trainer::ModelCheckpoint;

/// Environment variable naming the default checkpoint path.
pub const MODEL_ENV: &str = "SCOREGUIDE_MODEL";

fn as_srgb(image: &ImageBuffer) -> Result<ImageBuffer, EngineError> {
    match image.space() {
        ColorSpace::Srgb => Ok(image.clone()),
        _ => Ok(convert_image(image, ColorSpace::Srgb)?),
    }
}

pub fn default_model_path() -> Option<PathBuf> {
    std::env::var_os(MODEL_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("score {0} is outside the guide range [-1, 1]")]
    ScoreOutOfGuideRange(f64),
    #[error("score {0} is not finite")]
    NonFiniteScore(f64),
    #[error("cannot resolve a skin-tone label: {0}")]
    UnresolvedLabel(String),
    #[error("rounds must be at least 1")]
    ZeroRounds,
    #[error("score list is empty")]
    EmptyScores,
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    SkinTone(#[from] SkinToneError),
    #[error(transparent)]
    Color(#[from] crate::color::ColorError),
}

/// How the skin-tone label for a request is obtained.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum LabelChoice {
    #[default]
    Absent,
    Fixed(u8),
    /// Classify the mean skin color under `mask`, or the central crop without one.
    Auto { mask: Option<SkinMask> },
}

/// What to do with scores outside `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScorePolicy {
    #[default]
    Warn,
    Reject,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhanceRequest {
    pub score: f64,
    pub label: LabelChoice,
    pub rounds: usize,
}

impl EnhanceRequest {
    pub fn new(score: f64) -> Self {
        Self { score, label: LabelChoice::Absent, rounds: 1 }
    }

    pub fn with_label(mut self, label: LabelChoice) -> Self {
        self.label = label;
        self
    }

    pub fn with_rounds(mut self, rounds: usize) -> Self {
        self.rounds = rounds;
        self
    }
}

/// A loaded model plus inference policy. Immutable and cheap to share.
#[derive(Debug, Clone)]
pub struct Engine {
    checkpoint: ModelCheckpoint,
    centers: Option<SkinToneCenters>,
    policy: ScorePolicy,
}

impl Engine {
    pub fn new(checkpoint: ModelCheckpoint) -> Self {
        let centers = checkpoint.centers.clone();
        Self { checkpoint, centers, policy: ScorePolicy::Warn }
    }

    /// Centers used for `Auto` labels; overrides any stored in the checkpoint.
    pub fn with_centers(mut self, centers: SkinToneCenters) -> Self {
        self.centers = Some(centers);
        self
    }

    pub fn with_policy(mut self, policy: ScorePolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn checkpoint(&self) -> &ModelCheckpoint {
        &self.checkpoint
    }

    pub fn centers(&self) -> Option<&SkinToneCenters> {
        self.centers.as_ref()
    }

    /// Validates a score under the policy. `Ok(true)` means accepted with a warning.
    pub fn check_score(&self, score: f64) -> Result<bool, EngineError> {
        if !score.is_finite() {
            return Err(EngineError::NonFiniteScore(score));
        }
        if (-1.0..=1.0).contains(&score) {
            return Ok(false);
        }
        match self.policy {
            ScorePolicy::Warn => Ok(true),
            ScorePolicy::Reject => Err(EngineError::ScoreOutOfGuideRange(score)),
        }
    }

    /// The label fed to the network, `None` when the model does not use one.
    pub fn resolve_label(&self, image: &ImageBuffer, choice: &LabelChoice) -> Result<Option<u8>, EngineError> {
        if !self.checkpoint.arch().use_label {
            return Ok(None);
        }
        match choice {
            LabelChoice::Absent => Err(EngineError::UnresolvedLabel("the model needs a label; pass one or use auto".into())),
            LabelChoice::Fixed(l) => Ok(Some(*l)),
            LabelChoice::Auto { mask } => {
                let centers = self
                    .centers
                    .as_ref()
                    .ok_or_else(|| EngineError::UnresolvedLabel("no skin-tone centers available".into()))?;
                let central;
                let mask = match mask {
                    Some(m) => m,
                    None => {
                        central = SkinMask::central(image.width(), image.height());
                        &central
                    }
                };
                let srgb = as_srgb(image)?;
                Ok(Some(classify(mean_skin_color(&srgb, mask)?, centers)))
            }
        }
    }

    fn round(&self, image: &ImageBuffer, score: f64, label: &LabelChoice) -> Result<ImageBuffer, EngineError> {
        let label = self.resolve_label(image, label)?;
        let transform = self.checkpoint.transform(image, score, label, true)?;
        Ok(transform.apply(image)?)
    }

    /// Enhances `image` (any color space; output is sRGB at the input size).
    pub fn enhance(&self, image: &ImageBuffer, req: &EnhanceRequest) -> Result<ImageBuffer, EngineError> {
        if req.rounds == 0 {
            return Err(EngineError::ZeroRounds);
        }
        self.enhance_multi_round(image, &vec![req.score; req.rounds], &req.label)
    }

    /// Folds enhancement over `scores`; `Auto` labels are re-resolved every round.
    pub fn enhance_multi_round(
        &self,
        image: &ImageBuffer,
        scores: &[f64],
        label: &LabelChoice,
    ) -> Result<ImageBuffer, EngineError> {
        if scores.is_empty() {
            return Err(EngineError::EmptyScores);
        }
        for &s in scores {
            if self.check_score(s)? {
                log::warn!("score {s} is outside [-1, 1]; extended-range behavior depends on the model");
            }
        }
        let mut current = as_srgb(image)?;
        for &s in scores {
            current = self.round(&current, s, label)?;
        }
        Ok(current)
    }
}
