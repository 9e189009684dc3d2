//! Skin-tone centers: mean masked skin color, k-means in CIELAB, nearest-center
//! labeling and silhouette scoring.
//!
//! Centers files are plain text:
//!
//! ```text
//! provenance: clustered
//! 31.204 9.871 14.006
//! ...                      (10 lines of `L a b`)
//! ```

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::color::{srgb_to_lab, ColorError, ImageBuffer, LabPixel, RgbPixel};

pub const CENTER_COUNT: usize = 10;
const MAX_ITERATIONS: usize = 300;
const CONVERGENCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum SkinToneError {
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("dimension mismatch: image {image_w}x{image_h}, mask {mask_w}x{mask_h}")]
    DimensionMismatch { image_w: usize, image_h: usize, mask_w: usize, mask_h: usize },
    #[error("k-means needs at least k = {k} points, got {points}")]
    TooFewPoints { k: usize, points: usize },
    #[error("silhouette needs at least two non-empty clusters")]
    DegenerateClustering,
    #[error("invalid centers: {0}")]
    InvalidCenters(String),
    #[error("centers file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Color(#[from] ColorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Clustered,
    Imported,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Clustered => "clustered",
            Provenance::Imported => "imported",
        })
    }
}

impl FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "clustered" => Ok(Provenance::Clustered),
            "imported" => Ok(Provenance::Imported),
            other => Err(format!("unknown provenance '{other}'")),
        }
    }
}

/// Cluster centers in CIELAB, labeled `1..=len` in stored order.
///
/// Any count from 2 to 10 is accepted in memory (k-means may be run with a
/// smaller `k`); the centers file format requires exactly ten.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkinToneCenters {
    centers: Vec<[f64; 3]>,
    provenance: Provenance,
}

impl SkinToneCenters {
    pub fn new(centers: Vec<LabPixel>, provenance: Provenance) -> Result<Self, SkinToneError> {
        if !(2..=CENTER_COUNT).contains(&centers.len()) {
            return Err(SkinToneError::InvalidCenters(format!(
                "expected 2..={CENTER_COUNT} centers, got {}",
                centers.len()
            )));
        }
        for (i, a) in centers.iter().enumerate() {
            for b in &centers[i + 1..] {
                if a.distance(b) <= 0.0 {
                    return Err(SkinToneError::InvalidCenters("centers must be pairwise distinct".into()));
                }
            }
        }
        Ok(Self { centers: centers.iter().map(|c| c.to_array()).collect(), provenance })
    }

    /// The ten Monk Skin Tone reference swatches, converted from their sRGB hex values.
    pub fn monk() -> Self {
        const HEX: [u32; CENTER_COUNT] = [
            0xf6ede4, 0xf3e7db, 0xf7ead0, 0xeadaba, 0xd7bd96, 0xa07e56, 0x825c43, 0x604134, 0x3a312a, 0x292420,
        ];
        let centers = HEX
            .iter()
            .map(|h| {
                let c = |s: u32| ((h >> s) & 0xff) as f64 / 255.0;
                srgb_to_lab(RgbPixel::new(c(16), c(8), c(0)))
            })
            .collect();
        Self::new(centers, Provenance::Imported).expect("reference swatches are distinct")
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn center(&self, i: usize) -> LabPixel {
        let c = self.centers[i];
        LabPixel { l: c[0], a: c[1], b: c[2] }
    }

    pub fn centers(&self) -> Vec<LabPixel> {
        (0..self.len()).map(|i| self.center(i)).collect()
    }

    pub fn write<W: Write>(&self, out: &mut W) -> Result<(), SkinToneError> {
        if self.len() != CENTER_COUNT {
            return Err(SkinToneError::InvalidCenters(format!(
                "centers files hold exactly {CENTER_COUNT} centers, have {}",
                self.len()
            )));
        }
        writeln!(out, "provenance: {}", self.provenance)?;
        for c in &self.centers {
            writeln!(out, "{} {} {}", c[0], c[1], c[2])?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self, SkinToneError> {
        let mut provenance = None;
        let mut centers = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| SkinToneError::Parse { line: n + 1, message };
            if let Some(rest) = line.strip_prefix("provenance:") {
                provenance = Some(rest.parse::<Provenance>().map_err(err)?);
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|e: std::num::ParseFloatError| err(e.to_string()))?;
            if vals.len() != 3 || vals.iter().any(|v| !v.is_finite()) {
                return Err(err("expected three finite numbers `L a b`".into()));
            }
            centers.push(LabPixel::new(vals[0], vals[1], vals[2]));
        }
        let provenance = provenance.ok_or(SkinToneError::Parse { line: 0, message: "missing provenance header".into() })?;
        if centers.len() != CENTER_COUNT {
            return Err(SkinToneError::InvalidCenters(format!(
                "centers files hold exactly {CENTER_COUNT} centers, found {}",
                centers.len()
            )));
        }
        Self::new(centers, provenance)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SkinToneError> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SkinToneError> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }
}

/// A binary `H×W` skin mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl SkinMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self, SkinToneError> {
        if data.len() != width * height {
            return Err(SkinToneError::DimensionMismatch {
                image_w: width,
                image_h: height,
                mask_w: data.len(),
                mask_h: 1,
            });
        }
        Ok(Self { width, height, data })
    }

    /// Axis-aligned rectangle `[x0, x1) × [y0, y1)`.
    pub fn rect(width: usize, height: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x0..x1).contains(&x) && (y0..y1).contains(&y)))
            .collect();
        Self { width, height, data }
    }

    /// The central 50%×50% window (at least one pixel).
    pub fn central(width: usize, height: usize) -> Self {
        let (w0, h0) = (width / 4, height / 4);
        let (w1, h1) = ((width - width / 4).max(w0 + 1), (height - height / 4).max(h0 + 1));
        Self::rect(width, height, w0, h0, w1, h1)
    }

    /// Reads a mask from a PNG: any non-black pixel is skin.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, SkinToneError> {
        let img = crate::color::load_png(path)?;
        let data = img.pixels().map(|p| p.iter().any(|&v| v > 0.0)).collect();
        Self::new(img.width(), img.height(), data)
    }

    /// Writes skin pixels as white, the rest as black.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), SkinToneError> {
        let data = self.data.iter().flat_map(|&m| [if m { 1.0f32 } else { 0.0 }; 3]).collect();
        let img = ImageBuffer::new(self.width, self.height, crate::color::ColorSpace::Srgb, data)?;
        Ok(crate::color::save_png(&img, path)?)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

/// Mean of the Lab values of the masked pixels.
pub fn mean_skin_color(img: &ImageBuffer, mask: &SkinMask) -> Result<LabPixel, SkinToneError> {
    if img.width() != mask.width || img.height() != mask.height {
        return Err(SkinToneError::DimensionMismatch {
            image_w: img.width(),
            image_h: img.height(),
            mask_w: mask.width,
            mask_h: mask.height,
        });
    }
    let mut acc = [0.0f64; 3];
    let mut n = 0usize;
    for (p, &m) in img.pixels().zip(&mask.data) {
        if !m {
            continue;
        }
        let lab = srgb_to_lab(RgbPixel::new(p[0] as f64, p[1] as f64, p[2] as f64));
        acc[0] += lab.l;
        acc[1] += lab.a;
        acc[2] += lab.b;
        n += 1;
    }
    if n == 0 {
        return Err(SkinToneError::EmptyMask);
    }
    let n = n as f64;
    Ok(LabPixel::new(acc[0] / n, acc[1] / n, acc[2] / n))
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn nearest(p: &[f64; 3], centers: &[[f64; 3]]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centers.iter().enumerate() {
        let d = dist2(p, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Result of a k-means run with the per-iteration objective for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centers: Vec<LabPixel>,
    pub assignments: Vec<usize>,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

/// k-means++ seeding followed by Lloyd iterations; centers sorted by `L`.
pub fn kmeans(points: &[LabPixel], k: usize, seed: u64) -> Result<KMeansResult, SkinToneError> {
    if k == 0 || points.len() < k {
        return Err(SkinToneError::TooFewPoints { k, points: points.len() });
    }
    let pts: Vec<[f64; 3]> = points.iter().map(|p| p.to_array()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers = vec![pts[rng.random_range(0..pts.len())]];
    let mut d2: Vec<f64> = pts.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = pts.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            rng.random_range(0..pts.len())
        };
        centers.push(pts[pick]);
        for (d, p) in d2.iter_mut().zip(&pts) {
            *d = d.min(dist2(p, &centers[centers.len() - 1]));
        }
    }

    let mut assignments = vec![0usize; pts.len()];
    let mut trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..MAX_ITERATIONS {
        iterations += 1;
        for (a, p) in assignments.iter_mut().zip(&pts) {
            *a = nearest(p, &centers);
        }
        trace.push(pts.iter().zip(&assignments).map(|(p, &a)| dist2(p, &centers[a])).sum());
        let mut sums = vec![[0.0f64; 3]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in pts.iter().zip(&assignments) {
            for c in 0..3 {
                sums[a][c] += p[c];
            }
            counts[a] += 1;
        }
        let mut movement = 0.0f64;
        for i in 0..k {
            // An emptied cluster keeps its previous center.
            if counts[i] == 0 {
                continue;
            }
            let n = counts[i] as f64;
            let next = [sums[i][0] / n, sums[i][1] / n, sums[i][2] / n];
            movement = movement.max(dist2(&next, &centers[i]).sqrt());
            centers[i] = next;
        }
        if movement < CONVERGENCE {
            break;
        }
    }
    for (a, p) in assignments.iter_mut().zip(&pts) {
        *a = nearest(p, &centers);
    }
    trace.push(pts.iter().zip(&assignments).map(|(p, &a)| dist2(p, &centers[a])).sum());

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| centers[a][0].total_cmp(&centers[b][0]));
    let mut rank = vec![0; k];
    for (new, &old) in order.iter().enumerate() {
        rank[old] = new;
    }
    Ok(KMeansResult {
        centers: order.iter().map(|&i| LabPixel { l: centers[i][0], a: centers[i][1], b: centers[i][2] }).collect(),
        assignments: assignments.iter().map(|&a| rank[a]).collect(),
        objective_trace: trace,
        iterations,
    })
}

/// Clusters Lab points into `k` skin-tone centers.
pub fn kmeans_lab(points: &[LabPixel], k: usize, seed: u64) -> Result<SkinToneCenters, SkinToneError> {
    let result = kmeans(points, k, seed)?;
    SkinToneCenters::new(result.centers, Provenance::Clustered)
}

/// 1-based index of the nearest center; ties go to the lower index.
pub fn classify(c: LabPixel, centers: &SkinToneCenters) -> u8 {
    nearest(&c.to_array(), &centers.centers) as u8 + 1
}

/// Mean silhouette coefficient. `labels` are arbitrary cluster ids.
pub fn silhouette(points: &[LabPixel], labels: &[usize]) -> Result<f64, SkinToneError> {
    if points.len() != labels.len() {
        return Err(SkinToneError::DimensionMismatch {
            image_w: points.len(),
            image_h: 1,
            mask_w: labels.len(),
            mask_h: 1,
        });
    }
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(SkinToneError::DegenerateClustering);
    }
    let slot = |l: usize| ids.binary_search(&l).expect("label present");
    let sizes = labels.iter().fold(vec![0usize; ids.len()], |mut acc, &l| {
        acc[slot(l)] += 1;
        acc
    });
    let mut total = 0.0;
    let mut sums = vec![0.0f64; ids.len()];
    for (i, p) in points.iter().enumerate() {
        let own = slot(labels[i]);
        if sizes[own] == 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sums[slot(labels[j])] += p.distance(q);
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..ids.len())
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / points.len() as f64)
}
