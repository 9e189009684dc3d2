//! Subjective-score processing: kurtosis-gated outlier screening, subject
//! rejection, per-subject z-scores and the rescaled mean opinion score.
//!
//! Processing order used by [`process`]:
//!
//! 1. per image with at least 4 ratings: classify the rating distribution by
//!    kurtosis and flag ratings further than `2σ` (Gaussian) or `√20·σ`
//!    (non-Gaussian) from the image mean;
//! 2. reject every subject whose flagged fraction exceeds 5 %, then drop the
//!    remaining flagged ratings;
//! 3. z-score each subject over their retained ratings, map `z' = 100(z+3)/6`
//!    and average per image.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const RATING_LIMIT: f64 = 2.5;
pub const MIN_SCREENING_RATINGS: usize = 4;
pub const SUBJECT_REJECTION_FRACTION: f64 = 0.05;
const GAUSSIAN_FACTOR: f64 = 2.0;

#[derive(Debug, Error)]
pub enum MosError {
    #[error("at least {MIN_SCREENING_RATINGS} ratings are needed to classify a distribution, got {0}")]
    TooFewRatings(usize),
    #[error("rating {rating} by '{subject}' on '{image}' outside [-2.5, 2.5]")]
    RatingOutOfScale { subject: String, image: String, rating: f64 },
    #[error("duplicate rating by '{subject}' on '{image}'")]
    DuplicateRating { subject: String, image: String },
    #[error("every subject was rejected")]
    AllSubjectsRejected,
    #[error("subject '{0}' has zero rating variance")]
    ZeroVarianceSubject(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub subject_id: String,
    pub image_id: String,
    pub rating: f64,
}

/// Ratings with at most one record per `(subject, image)`, all within scale.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RatingTable {
    records: Vec<Rating>,
}

impl RatingTable {
    pub fn new(records: Vec<Rating>) -> Result<Self, MosError> {
        let mut seen = HashSet::new();
        for r in &records {
            if !r.rating.is_finite() || r.rating.abs() > RATING_LIMIT {
                return Err(MosError::RatingOutOfScale {
                    subject: r.subject_id.clone(),
                    image: r.image_id.clone(),
                    rating: r.rating,
                });
            }
            if !seen.insert((r.subject_id.as_str(), r.image_id.as_str())) {
                return Err(MosError::DuplicateRating { subject: r.subject_id.clone(), image: r.image_id.clone() });
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[Rating] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Reads `subject_id,image_id,rating` CSV. Additional columns are ignored.
    pub fn read_csv<R: Read>(input: R) -> Result<Self, MosError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let records = reader.deserialize().collect::<Result<Vec<Rating>, _>>()?;
        Self::new(records)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self, MosError> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), MosError> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    fn by_image(&self) -> BTreeMap<&str, Vec<&Rating>> {
        let mut map: BTreeMap<&str, Vec<&Rating>> = BTreeMap::new();
        for r in &self.records {
            map.entry(&r.image_id).or_default().push(r);
        }
        map
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    Gaussian,
    NonGaussian,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `β2 = m4 / m2²` with population central moments; `None` when `m2 = 0`.
pub fn kurtosis(ratings: &[f64]) -> Option<f64> {
    let m = mean(ratings);
    let n = ratings.len() as f64;
    let m2 = ratings.iter().map(|r| (r - m).powi(2)).sum::<f64>() / n;
    let m4 = ratings.iter().map(|r| (r - m).powi(4)).sum::<f64>() / n;
    (m2 > 0.0).then(|| m4 / (m2 * m2))
}

/// Gaussian iff `2 ≤ β2 ≤ 4`; zero variance counts as non-Gaussian.
pub fn classify_distribution(ratings: &[f64]) -> Result<Distribution, MosError> {
    if ratings.len() < MIN_SCREENING_RATINGS {
        return Err(MosError::TooFewRatings(ratings.len()));
    }
    Ok(match kurtosis(ratings) {
        Some(b) if (2.0..=4.0).contains(&b) => Distribution::Gaussian,
        _ => Distribution::NonGaussian,
    })
}

/// Indices of ratings further than `2σ` (Gaussian) or `√20·σ` from the mean,
/// `σ` being the sample standard deviation.
pub fn flag_outliers(ratings: &[f64], class: Distribution) -> Vec<usize> {
    if ratings.len() < 2 {
        return Vec::new();
    }
    let m = mean(ratings);
    let sd = (ratings.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (ratings.len() - 1) as f64).sqrt();
    let factor = match class {
        Distribution::Gaussian => GAUSSIAN_FACTOR,
        Distribution::NonGaussian => 20f64.sqrt(),
    };
    ratings
        .iter()
        .enumerate()
        .filter(|(_, r)| (*r - m).abs() > factor * sd)
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RatingKey {
    pub subject_id: String,
    pub image_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScreening {
    pub image_id: String,
    pub n_ratings: usize,
    /// `None` when the image had too few ratings to screen or zero variance.
    pub kurtosis: Option<f64>,
    pub distribution: Option<Distribution>,
    pub flagged: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RejectionReport {
    pub rejected_subjects: Vec<String>,
    pub outliers: Vec<RatingKey>,
    pub images: Vec<ImageScreening>,
    pub total_ratings: usize,
    pub removed_ratings: usize,
}

impl RejectionReport {
    pub fn removed_fraction(&self) -> f64 {
        if self.total_ratings == 0 {
            0.0
        } else {
            self.removed_ratings as f64 / self.total_ratings as f64
        }
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<(), MosError> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }
}

/// Screens every image and returns the flagged `(subject, image)` pairs and
/// the per-image bookkeeping.
pub fn screen(table: &RatingTable) -> (BTreeSet<RatingKey>, Vec<ImageScreening>) {
    let mut flags = BTreeSet::new();
    let mut images = Vec::new();
    for (image, rs) in table.by_image() {
        let values: Vec<f64> = rs.iter().map(|r| r.rating).collect();
        let (kurt, class, flagged) = match classify_distribution(&values) {
            Ok(class) => {
                let idx = flag_outliers(&values, class);
                for &i in &idx {
                    flags.insert(RatingKey { subject_id: rs[i].subject_id.clone(), image_id: image.to_string() });
                }
                (kurtosis(&values), Some(class), idx.len())
            }
            Err(_) => (None, None, 0),
        };
        images.push(ImageScreening {
            image_id: image.to_string(),
            n_ratings: values.len(),
            kurtosis: kurt,
            distribution: class,
            flagged,
        });
    }
    (flags, images)
}

/// Rejects subjects whose flagged fraction is strictly above 5 %, then removes
/// the remaining flagged ratings.
pub fn reject_subjects(
    table: &RatingTable,
    flags: &BTreeSet<RatingKey>,
) -> Result<(RatingTable, RejectionReport), MosError> {
    let mut totals: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in &table.records {
        let e = totals.entry(&r.subject_id).or_default();
        e.0 += 1;
        if flags.contains(&RatingKey { subject_id: r.subject_id.clone(), image_id: r.image_id.clone() }) {
            e.1 += 1;
        }
    }
    let rejected: BTreeSet<&str> = totals
        .iter()
        .filter(|(_, (n, f))| *f as f64 / *n as f64 > SUBJECT_REJECTION_FRACTION)
        .map(|(s, _)| *s)
        .collect();
    if !totals.is_empty() && rejected.len() == totals.len() {
        return Err(MosError::AllSubjectsRejected);
    }
    let kept: Vec<Rating> = table
        .records
        .iter()
        .filter(|r| {
            !rejected.contains(r.subject_id.as_str())
                && !flags.contains(&RatingKey { subject_id: r.subject_id.clone(), image_id: r.image_id.clone() })
        })
        .cloned()
        .collect();
    let report = RejectionReport {
        rejected_subjects: rejected.iter().map(|s| s.to_string()).collect(),
        outliers: flags.iter().cloned().collect(),
        images: Vec::new(),
        total_ratings: table.len(),
        removed_ratings: table.len() - kept.len(),
    };
    Ok((RatingTable { records: kept }, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosEntry {
    pub image_id: String,
    pub mos: f64,
    pub n_ratings: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MosTable {
    pub entries: Vec<MosEntry>,
    pub report: RejectionReport,
}

impl MosTable {
    pub fn get(&self, image_id: &str) -> Option<&MosEntry> {
        self.entries.iter().find(|e| e.image_id == image_id)
    }

    /// Writes `image_id,mos,normalized_score,n_ratings`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), MosError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["image_id", "mos", "normalized_score", "n_ratings"])?;
        for e in &self.entries {
            w.write_record([
                e.image_id.clone(),
                format!("{:.6}", e.mos),
                format!("{:.6}", normalize_for_training(e.mos)),
                e.n_ratings.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-subject z-scores rescaled to `100(z+3)/6`, averaged over the subjects
/// that rated each image.
pub fn compute_mos(retained: &RatingTable) -> Result<MosTable, MosError> {
    let mut by_subject: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in &retained.records {
        by_subject.entry(&r.subject_id).or_default().push(r.rating);
    }
    let mut stats = BTreeMap::new();
    for (s, v) in &by_subject {
        let m = mean(v);
        let sd = (v.iter().map(|r| (r - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        if sd <= 0.0 {
            return Err(MosError::ZeroVarianceSubject(s.to_string()));
        }
        stats.insert(*s, (m, sd));
    }
    let entries = retained
        .by_image()
        .into_iter()
        .map(|(image, rs)| {
            let sum: f64 = rs
                .iter()
                .map(|r| {
                    let (m, sd) = stats[r.subject_id.as_str()];
                    rescale_z((r.rating - m) / sd)
                })
                .sum();
            MosEntry { image_id: image.to_string(), mos: sum / rs.len() as f64, n_ratings: rs.len() }
        })
        .collect();
    Ok(MosTable { entries, report: RejectionReport::default() })
}

/// `z' = 100(z + 3)/6`.
pub fn rescale_z(z: f64) -> f64 {
    100.0 * (z + 3.0) / 6.0
}

/// Screening, rejection and MOS in one pass; the report is attached to the table.
pub fn process(table: &RatingTable) -> Result<MosTable, MosError> {
    let (flags, images) = screen(table);
    let (retained, mut report) = reject_subjects(table, &flags)?;
    report.images = images;
    let mut mos = compute_mos(&retained)?;
    mos.report = report;
    Ok(mos)
}

/// MOS on the `[0, 100]` z′ scale to a training score: `(mos − 50)/50`, clamped.
pub fn normalize_for_training(mos: f64) -> f64 {
    ((mos - 50.0) / 50.0).clamp(-1.0, 1.0)
}

/// Raw rating in `[-2.5, 2.5]` to a training score, clamped.
pub fn normalize_direct(raw: f64) -> f64 {
    (raw / RATING_LIMIT).clamp(-1.0, 1.0)
}
