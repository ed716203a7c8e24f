//! Seeded synthetic cohort: chest-radiograph-like images with planted
//! calcification blobs, matching score labels and survival outcomes.
//!
//! Each subject draws from its own stream derived from `(seed, index)`, so
//! the output does not depend on the number of worker threads. The cohort
//! part (score, covariates) is drawn before any image content, which lets
//! [`generate_cohort`] produce the same subjects as [`generate_samples`]
//! without rendering pixels.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dicom::{write_test_dicom, DicomImage, Photometric};
use crate::fsio::write_atomic;
use crate::image::RealImage;
use crate::preprocess::PreprocessConfig;
use crate::rng::{stream_rng, Stream};
use crate::survival::{cac_category, write_cohort_csv, SubjectRecord};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Format(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Censoring {
    /// Everyone is followed to `max_followup_years`.
    Administrative,
    /// Censoring times uniform on `(0, max_followup_years]`.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n: usize,
    /// Side length of the generated square images.
    pub image_dim: usize,
    pub zero_fraction: f64,
    pub cac_max: f64,
    /// Inclusive range of blob counts for a positive subject.
    pub blob_count_range: [u32; 2],
    /// Inclusive range of blob radii (Gaussian sigma) in pixels.
    pub blob_radius_range: [u32; 2],
    /// Peak blob amplitude per unit of ln(1 + cac), in stored pixel units.
    pub blob_gain: f64,
    /// Events per year in category 0.
    pub baseline_hazard: f64,
    pub hazard_ratio_per_category: f64,
    pub max_followup_years: f64,
    pub censoring: Censoring,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 400,
            image_dim: 96,
            zero_fraction: 0.3,
            cac_max: 2000.0,
            blob_count_range: [1, 1],
            blob_radius_range: [3, 4],
            blob_gain: 1000.0,
            baseline_hazard: 0.03,
            hazard_ratio_per_category: 2.5,
            max_followup_years: 5.0,
            censoring: Censoring::Uniform,
            seed: 0,
        }
    }
}

/// Stored pixel levels of the rendered images. The silhouette is darker than
/// its surroundings: histogram equalization maps intensities to ranks, so a
/// blob only keeps its contrast if its local background ranks low.
const BACKGROUND_LEVEL: f64 = 1500.0;
const FIELD_AMPLITUDE: f64 = 250.0;
const SILHOUETTE_LEVEL: f64 = -400.0;
const NOISE_SD: f64 = 12.0;
const BITS: u16 = 14;

/// Blobs are Gaussians truncated at 1.5 sigma, which gives them a crisp rim;
/// the half-width of the square support in pixels.
fn blob_half_width(radius: u32) -> u32 {
    (3 * radius).div_ceil(2)
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.n == 0 {
            return bad("n must be positive");
        }
        if self.image_dim < 32 {
            return bad("image_dim must be at least 32");
        }
        if !(0.0..1.0).contains(&self.zero_fraction) && self.zero_fraction != 1.0 {
            return bad("zero_fraction must lie in [0, 1]");
        }
        if !(self.cac_max > 1.0 && self.cac_max.is_finite()) {
            return bad("cac_max must exceed 1");
        }
        let [c0, c1] = self.blob_count_range;
        let [r0, r1] = self.blob_radius_range;
        if c0 == 0 || c0 > c1 {
            return bad("blob_count_range must be a nonempty range of positive counts");
        }
        if r0 == 0 || r0 > r1 || 2 * blob_half_width(r1) + 1 > self.image_dim as u32 / 4 {
            return bad(
                "blob_radius_range must be nonempty, positive and small relative to image_dim",
            );
        }
        if !(self.blob_gain > 0.0) || self.blob_gain * (1.0 + self.cac_max).ln() > 8000.0 {
            return bad("blob_gain must be positive and keep blobs within the stored range");
        }
        if !(self.baseline_hazard >= 0.0 && self.baseline_hazard.is_finite()) {
            return bad("baseline_hazard must be nonnegative");
        }
        if !(self.hazard_ratio_per_category > 0.0 && self.hazard_ratio_per_category.is_finite()) {
            return bad("hazard_ratio_per_category must be positive");
        }
        if !(self.max_followup_years > 0.0 && self.max_followup_years.is_finite()) {
            return bad("max_followup_years must be positive");
        }
        Ok(())
    }

    /// Cardiac silhouette: center (x, y) and semi-axes (a, b) in pixels,
    /// below and to the image right of center like a frontal heart shadow.
    pub fn silhouette(&self) -> (f64, f64, f64, f64) {
        let d = self.image_dim as f64;
        (0.6 * d, 0.6 * d, 0.15 * d, 0.13 * d)
    }
}

/// Half-open pixel rectangle `[x, x+w) x [y, y+h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BlobBox {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    /// The rectangle in model-input coordinates after a square resize to
    /// `cfg.resize_dim` and the center crop, rounded outward and clipped;
    /// `None` if it falls outside the crop.
    pub fn to_input(&self, source_dim: usize, cfg: &PreprocessConfig) -> Option<BlobBox> {
        let scale = cfg.resize_dim as f64 / source_dim as f64;
        let off = cfg.crop_offset() as f64;
        let lim = cfg.crop_dim as f64;
        let edge = |v: usize| v as f64 * scale - off;
        let x0 = edge(self.x).floor().max(0.0);
        let y0 = edge(self.y).floor().max(0.0);
        let x1 = edge(self.x + self.w).ceil().min(lim);
        let y1 = edge(self.y + self.h).ceil().min(lim);
        (x1 > x0 && y1 > y0).then(|| BlobBox {
            x: x0 as usize,
            y: y0 as usize,
            w: (x1 - x0) as usize,
            h: (y1 - y0) as usize,
        })
    }
}

/// A planted blob: a Gaussian bump truncated to its box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub cx: usize,
    pub cy: usize,
    pub radius: u32,
    /// Peak added intensity, `blob_gain * ln(1 + cac)`.
    pub amplitude: f64,
    pub bbox: BlobBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub id: String,
    pub image: RealImage,
    pub cac: f64,
    pub blobs: Vec<Blob>,
    pub record: SubjectRecord,
}

impl SynthSample {
    pub fn blob_boxes(&self) -> Vec<BlobBox> {
        self.blobs.iter().map(|b| b.bbox).collect()
    }
}

pub fn sample_id(i: usize) -> String {
    format!("syn{i:05}")
}

/// Score and covariates, drawn first from the subject's stream.
fn draw_subject(cfg: &SynthConfig, i: usize, rng: &mut ChaCha8Rng) -> SubjectRecord {
    let zero = rng.gen::<f64>() < cfg.zero_fraction;
    // Log-uniform on [1, cac_max], rounded to the integer Agatston scale.
    let u: f64 = rng.gen();
    let cac = if zero {
        0.0
    } else {
        cfg.cac_max.powf(u).round().clamp(1.0, cfg.cac_max)
    };
    let esc_class = f64::from(rng.gen_range(0u8..4));
    let age = rng.gen_range(40.0f64..80.0).round();
    let sex = f64::from(u8::from(rng.gen_bool(0.5)));
    let mut covariates = IndexMap::new();
    covariates.insert("ai_cac".to_string(), cac);
    covariates.insert("cac".to_string(), cac);
    covariates.insert("ai_cac_category".to_string(), f64::from(cac_category(cac)));
    covariates.insert("esc_class".to_string(), esc_class);
    covariates.insert("age".to_string(), age);
    covariates.insert("sex".to_string(), sex);
    SubjectRecord {
        id: sample_id(i),
        time: cfg.max_followup_years,
        event: false,
        covariates,
    }
}

fn inside_ellipse(x: f64, y: f64, e: (f64, f64, f64, f64)) -> bool {
    let (cx, cy, a, b) = e;
    ((x - cx) / a).powi(2) + ((y - cy) / b).powi(2) <= 1.0
}

fn place_blobs(cfg: &SynthConfig, cac: f64, rng: &mut ChaCha8Rng) -> Vec<Blob> {
    if cac == 0.0 {
        return Vec::new();
    }
    let e = cfg.silhouette();
    let count = rng.gen_range(cfg.blob_count_range[0]..=cfg.blob_count_range[1]);
    let amplitude = cfg.blob_gain * (1.0 + cac).ln();
    let mut blobs = Vec::with_capacity(count as usize);
    while blobs.len() < count as usize {
        let radius = rng.gen_range(cfg.blob_radius_range[0]..=cfg.blob_radius_range[1]);
        let half = blob_half_width(radius) as usize;
        let cx = rng.gen_range(e.0 - e.2..e.0 + e.2).round() as usize;
        let cy = rng.gen_range(e.1 - e.3..e.1 + e.3).round() as usize;
        if cx < half || cy < half {
            continue;
        }
        let bbox = BlobBox {
            x: cx - half,
            y: cy - half,
            w: 2 * half + 1,
            h: 2 * half + 1,
        };
        // The ellipse is convex, so checking the corners keeps the whole box
        // inside it.
        let corners = [
            (bbox.x, bbox.y),
            (bbox.x + bbox.w, bbox.y),
            (bbox.x, bbox.y + bbox.h),
            (bbox.x + bbox.w, bbox.y + bbox.h),
        ];
        if corners
            .iter()
            .all(|&(x, y)| inside_ellipse(x as f64, y as f64, e))
        {
            blobs.push(Blob {
                cx,
                cy,
                radius,
                amplitude,
                bbox,
            });
        }
    }
    blobs
}

fn render(cfg: &SynthConfig, blobs: &[Blob], rng: &mut ChaCha8Rng) -> RealImage {
    let d = cfg.image_dim;
    let df = d as f64;
    // Smooth random field: a few low-frequency plane waves.
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let fx = rng.gen_range(0.3..1.5) * std::f64::consts::TAU / df;
            let fy = rng.gen_range(0.3..1.5) * std::f64::consts::TAU / df;
            (
                fx,
                fy,
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.3..1.0),
            )
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w.3).sum();
    let e = cfg.silhouette();
    let noise = Normal::new(0.0, NOISE_SD).expect("valid sd");
    let mut img = RealImage::from_fn(d, d, |r, c| {
        let (x, y) = (c as f64, r as f64);
        let field: f64 = waves
            .iter()
            .map(|&(fx, fy, ph, a)| a * (fx * x + fy * y + ph).cos())
            .sum::<f64>()
            / norm;
        // Soft-edged silhouette.
        let rho = (((x - e.0) / e.2).powi(2) + ((y - e.1) / e.3).powi(2)).sqrt();
        let sil = 1.0 / (1.0 + ((rho - 1.0) * 8.0).exp());
        BACKGROUND_LEVEL + FIELD_AMPLITUDE * field + SILHOUETTE_LEVEL * sil + noise.sample(rng)
    })
    .into_values();
    for b in blobs {
        let s2 = 2.0 * f64::from(b.radius).powi(2);
        for r in b.bbox.y..b.bbox.y + b.bbox.h {
            for c in b.bbox.x..b.bbox.x + b.bbox.w {
                let dx = c as f64 - b.cx as f64;
                let dy = r as f64 - b.cy as f64;
                img[r * d + c] += b.amplitude * (-(dx * dx + dy * dy) / s2).exp();
            }
        }
    }
    let max = f64::from((1u32 << BITS) - 1);
    img.iter_mut().for_each(|v| *v = v.round().clamp(0.0, max));
    RealImage::new(d, d, img).expect("finite by construction")
}

/// Subjects without images; identical to the records of
/// [`generate_samples`] for the same config.
pub fn generate_cohort(cfg: &SynthConfig) -> Result<Vec<SubjectRecord>, SynthError> {
    cfg.validate()?;
    Ok((0..cfg.n)
        .into_par_iter()
        .map(|i| draw_subject(cfg, i, &mut stream_rng(cfg.seed, Stream::Synth, i as u64)))
        .collect())
}

pub fn generate_samples(cfg: &SynthConfig) -> Result<Vec<SynthSample>, SynthError> {
    cfg.validate()?;
    Ok((0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, Stream::Synth, i as u64);
            let record = draw_subject(cfg, i, &mut rng);
            let cac = record.covariates["cac"];
            let blobs = place_blobs(cfg, cac, &mut rng);
            let image = render(cfg, &blobs, &mut rng);
            SynthSample {
                id: record.id.clone(),
                image,
                cac,
                blobs,
                record,
            }
        })
        .collect())
}

/// Draws follow-up for each record: event times are exponential with rate
/// `baseline_hazard * hazard_ratio_per_category ^ ai_cac_category`, and the
/// observed time is the earlier of the event and the censoring time.
pub fn generate_survival(
    cfg: &SynthConfig,
    records: &mut [SubjectRecord],
) -> Result<(), SynthError> {
    cfg.validate()?;
    for (i, r) in records.iter_mut().enumerate() {
        let category = *r
            .covariates
            .get("ai_cac_category")
            .ok_or_else(|| SynthError::Format(format!("record {} has no ai_cac_category", r.id)))?;
        let mut rng = stream_rng(cfg.seed, Stream::Survival, i as u64);
        let rate = cfg.baseline_hazard * cfg.hazard_ratio_per_category.powf(category);
        let u: f64 = 1.0 - rng.gen::<f64>(); // in (0, 1]
        let event_time = if rate > 0.0 {
            -u.ln() / rate
        } else {
            f64::INFINITY
        };
        let censor = match cfg.censoring {
            Censoring::Administrative => cfg.max_followup_years,
            Censoring::Uniform => cfg.max_followup_years * (1.0 - rng.gen::<f64>()),
        };
        r.event = event_time <= censor;
        // Guard against a zero time from a vanishing event draw.
        r.time = event_time.min(censor).max(1e-6);
    }
    Ok(())
}

/// The stored-pixel DICOM form of a generated image.
pub fn to_dicom(image: &RealImage) -> DicomImage {
    let max = (1i64 << BITS) - 1;
    DicomImage {
        rows: image.height(),
        cols: image.width(),
        bits_allocated: 16,
        bits_stored: BITS,
        signed: false,
        photometric: Photometric::Monochrome2,
        window_center: (max + 1) as f64 / 2.0,
        window_width: (max + 1) as f64,
        rescale_slope: 1.0,
        rescale_intercept: 0.0,
        pixels: image.values().iter().map(|&v| v as i32).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthManifest {
    pub seed: u64,
    pub n: usize,
    pub config: SynthConfig,
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobRow {
    pub id: String,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Writes `images/<id>.dcm`, `cohort.csv`, `blobs.csv` and `manifest.json`
/// under `dir`.
pub fn write_dataset(
    cfg: &SynthConfig,
    samples: &[SynthSample],
    dir: &Path,
) -> Result<(), SynthError> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    for s in samples {
        let path = images.join(format!("{}.dcm", s.id));
        write_atomic(&path, &write_test_dicom(&to_dicom(&s.image))).map_err(io_err(&path))?;
    }
    let records: Vec<SubjectRecord> = samples.iter().map(|s| s.record.clone()).collect();
    let mut cohort = Vec::new();
    write_cohort_csv(&records, &mut cohort).map_err(|e| SynthError::Format(e.to_string()))?;
    let path = dir.join("cohort.csv");
    write_atomic(&path, &cohort).map_err(io_err(&path))?;

    let mut w = csv::Writer::from_writer(Vec::new());
    for s in samples {
        for b in &s.blobs {
            let bb = b.bbox;
            w.serialize(BlobRow {
                id: s.id.clone(),
                x: bb.x,
                y: bb.y,
                w: bb.w,
                h: bb.h,
            })
            .map_err(|e| SynthError::Format(e.to_string()))?;
        }
    }
    // An empty set still gets its header.
    if samples.iter().all(|s| s.blobs.is_empty()) {
        w.write_record(["id", "x", "y", "w", "h"])
            .map_err(|e| SynthError::Format(e.to_string()))?;
    }
    let blobs = w
        .into_inner()
        .map_err(|e| SynthError::Format(e.to_string()))?;
    let path = dir.join("blobs.csv");
    write_atomic(&path, &blobs).map_err(io_err(&path))?;

    let manifest = SynthManifest {
        seed: cfg.seed,
        n: samples.len(),
        config: cfg.clone(),
        ids: samples.iter().map(|s| s.id.clone()).collect(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&path, (text + "\n").as_bytes()).map_err(io_err(&path))?;
    Ok(())
}

pub fn read_blobs_csv(input: impl io::Read) -> Result<Vec<BlobRow>, SynthError> {
    csv::Reader::from_reader(input)
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| SynthError::Format(e.to_string()))
}
