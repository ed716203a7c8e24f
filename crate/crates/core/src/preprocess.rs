//! Radiograph preprocessing: windowing, histogram equalization, bilinear
//! resize, center crop and dataset standardization, applied in that order.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::dicom::{to_real_image, DicomImage};
use crate::image::RealImage;

#[derive(Debug, thiserror::Error)]
pub enum PreprocessError {
    #[error("window width must be positive, got {0}")]
    NonPositiveWidth(f64),
    #[error("equalization needs at least 2 levels, got {0}")]
    TooFewLevels(usize),
    #[error("crop size {size} exceeds image size {height}x{width}")]
    CropLargerThanImage {
        size: usize,
        height: usize,
        width: usize,
    },
    #[error("dataset has zero pixel variance")]
    DegenerateDataset,
    #[error("invalid preprocessing config: {0}")]
    InvalidConfig(String),
    #[error("tensor cache: {0}")]
    BadCache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub resize_dim: usize,
    pub crop_dim: usize,
    pub eq_levels: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            resize_dim: 1248,
            crop_dim: 1024,
            eq_levels: 256,
        }
    }
}

impl PreprocessConfig {
    /// Small-scale counterpart of the default with the same resize/crop
    /// ratio, producing the 64x64 inputs of the desk network preset.
    pub fn desk() -> Self {
        Self {
            resize_dim: 78,
            crop_dim: 64,
            eq_levels: 256,
        }
    }

    /// Offset of the center crop inside the resized image.
    pub fn crop_offset(&self) -> usize {
        (self.resize_dim - self.crop_dim) / 2
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.resize_dim == 0 || self.crop_dim == 0 {
            return Err(PreprocessError::InvalidConfig(
                "dimensions must be positive".into(),
            ));
        }
        if self.crop_dim > self.resize_dim {
            return Err(PreprocessError::InvalidConfig(format!(
                "crop_dim {} exceeds resize_dim {}",
                self.crop_dim, self.resize_dim
            )));
        }
        if self.eq_levels < 2 {
            return Err(PreprocessError::TooFewLevels(self.eq_levels));
        }
        Ok(())
    }
}

/// Pooled pixel statistics of a training set.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetStats {
    pub mu: f64,
    pub sigma: f64,
}

/// A standardized square image ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTensor {
    dim: usize,
    values: Vec<f64>,
}

impl InputTensor {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self, PreprocessError> {
        if dim == 0 || values.len() != dim * dim {
            return Err(PreprocessError::InvalidConfig(format!(
                "tensor of dim {dim} needs {} values, got {}",
                dim * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(PreprocessError::InvalidConfig(
                "tensor holds non-finite values".into(),
            ));
        }
        Ok(Self { dim, values })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn window(img: &RealImage, center: f64, width: f64) -> Result<RealImage, PreprocessError> {
    if !(width > 0.0) {
        return Err(PreprocessError::NonPositiveWidth(width));
    }
    let lo = center - width / 2.0;
    let hi = center + width / 2.0;
    Ok(img.map(|v| v.clamp(lo, hi)))
}

/// Histogram equalization over `levels` bins spanning the image's own range.
///
/// Each value is assigned to its bin and replaced by the normalized
/// cumulative count of that bin, `(cdf[b] - cdf_min) / (n - cdf_min)`, scaled
/// to `[0, levels - 1]`. A constant image maps to all zeros.
pub fn equalize(img: &RealImage, levels: usize) -> Result<RealImage, PreprocessError> {
    if levels < 2 {
        return Err(PreprocessError::TooFewLevels(levels));
    }
    let (lo, hi) = img.min_max();
    if hi <= lo {
        return Ok(RealImage::filled(img.height(), img.width(), 0.0));
    }
    let span = hi - lo;
    let bin_of = |v: f64| -> usize {
        let b = ((v - lo) / span * levels as f64).floor() as usize;
        b.min(levels - 1)
    };
    let mut hist = vec![0usize; levels];
    for &v in img.values() {
        hist[bin_of(v)] += 1;
    }
    let mut cdf = hist;
    for b in 1..levels {
        cdf[b] += cdf[b - 1];
    }
    let n = img.values().len();
    let cdf_min = *cdf.iter().find(|&&c| c > 0).expect("nonempty image");
    // One rounding per value (integer product, single division), so the
    // top bin lands exactly on `levels - 1`.
    let den = (n - cdf_min) as f64;
    Ok(img.map(|v| ((cdf[bin_of(v)] - cdf_min) * (levels - 1)) as f64 / den))
}

fn source_coord(i: usize, scale: f64, len: usize) -> (usize, usize, f64) {
    let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
    let x0 = x.floor() as usize;
    let x1 = (x0 + 1).min(len - 1);
    (x0, x1, x - x0 as f64)
}

/// Bilinear resize to a `target`x`target` grid (half-pixel centers, edges
/// clamped).
pub fn resize_bilinear(img: &RealImage, target: usize) -> RealImage {
    assert!(target > 0, "resize target must be positive");
    let (h, w) = (img.height(), img.width());
    let sy = h as f64 / target as f64;
    let sx = w as f64 / target as f64;
    let cols: Vec<_> = (0..target).map(|j| source_coord(j, sx, w)).collect();
    let mut out = Vec::with_capacity(target * target);
    for i in 0..target {
        let (y0, y1, fy) = source_coord(i, sy, h);
        for &(x0, x1, fx) in &cols {
            let top = img.get(y0, x0) * (1.0 - fx) + img.get(y0, x1) * fx;
            let bottom = img.get(y1, x0) * (1.0 - fx) + img.get(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    RealImage::new(target, target, out).expect("bilinear resize keeps values finite")
}

pub fn center_crop(img: &RealImage, size: usize) -> Result<RealImage, PreprocessError> {
    let (h, w) = (img.height(), img.width());
    if size == 0 || size > h || size > w {
        return Err(PreprocessError::CropLargerThanImage {
            size,
            height: h,
            width: w,
        });
    }
    let top = (h - size) / 2;
    let left = (w - size) / 2;
    Ok(RealImage::from_fn(size, size, |r, c| {
        img.get(top + r, left + c)
    }))
}

/// Pooled mean and population standard deviation over every pixel of every
/// image, summed in a fixed order.
pub fn compute_dataset_stats(images: &[RealImage]) -> Result<DatasetStats, PreprocessError> {
    let count: usize = images.iter().map(|im| im.values().len()).sum();
    if count == 0 {
        return Err(PreprocessError::DegenerateDataset);
    }
    let n = count as f64;
    let mu = images.iter().flat_map(|im| im.values()).sum::<f64>() / n;
    let var = images
        .iter()
        .flat_map(|im| im.values())
        .map(|&v| (v - mu) * (v - mu))
        .sum::<f64>()
        / n;
    let sigma = var.sqrt();
    if !(sigma > 0.0) {
        return Err(PreprocessError::DegenerateDataset);
    }
    Ok(DatasetStats { mu, sigma })
}

pub fn standardize(img: &RealImage, stats: &DatasetStats) -> InputTensor {
    assert!(stats.sigma > 0.0, "standardize needs sigma > 0");
    assert_eq!(
        img.height(),
        img.width(),
        "standardize expects a square image"
    );
    let values = img
        .values()
        .iter()
        .map(|&v| (v - stats.mu) / stats.sigma)
        .collect();
    InputTensor {
        dim: img.height(),
        values,
    }
}

/// Every stage up to (not including) standardization.
pub fn prepare_image(
    img: &DicomImage,
    cfg: &PreprocessConfig,
) -> Result<RealImage, PreprocessError> {
    cfg.validate()?;
    let real = to_real_image(img);
    let windowed = window(&real, img.window_center, img.window_width)?;
    let equalized = equalize(&windowed, cfg.eq_levels)?;
    let resized = resize_bilinear(&equalized, cfg.resize_dim);
    center_crop(&resized, cfg.crop_dim)
}

pub fn preprocess_pipeline(
    img: &DicomImage,
    cfg: &PreprocessConfig,
    stats: &DatasetStats,
) -> Result<InputTensor, PreprocessError> {
    if !(stats.sigma > 0.0) {
        return Err(PreprocessError::DegenerateDataset);
    }
    Ok(standardize(&prepare_image(img, cfg)?, stats))
}

/// Prepares many images in parallel; output order matches input order.
pub fn prepare_batch(
    images: &[DicomImage],
    cfg: &PreprocessConfig,
) -> Result<Vec<RealImage>, PreprocessError> {
    images.par_iter().map(|im| prepare_image(im, cfg)).collect()
}

// ---------------------------------------------------------------------------
// Tensor cache and stats CSV

const CACHE_MAGIC: &[u8; 4] = b"CACT";
const CACHE_VERSION: u16 = 1;

pub fn write_tensor_cache(t: &InputTensor, mut out: impl Write) -> Result<(), PreprocessError> {
    out.write_all(CACHE_MAGIC)?;
    out.write_all(&CACHE_VERSION.to_le_bytes())?;
    out.write_all(&(t.dim as u32).to_le_bytes())?;
    for &v in &t.values {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor_cache(mut input: impl Read) -> Result<InputTensor, PreprocessError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 10 || &bytes[..4] != CACHE_MAGIC {
        return Err(PreprocessError::BadCache("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CACHE_VERSION {
        return Err(PreprocessError::BadCache(format!(
            "unsupported version {version}"
        )));
    }
    let dim = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let body = &bytes[10..];
    if body.len() != dim * dim * 4 {
        return Err(PreprocessError::BadCache(format!(
            "expected {} payload bytes, found {}",
            dim * dim * 4,
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    InputTensor::new(dim, values).map_err(|e| PreprocessError::BadCache(e.to_string()))
}

pub fn write_stats_csv(stats: &DatasetStats, out: impl Write) -> Result<(), PreprocessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["mu", "sigma"]).map_err(csv_err)?;
    w.write_record([stats.mu.to_string(), stats.sigma.to_string()])
        .map_err(csv_err)?;
    w.flush()?;
    Ok(())
}

pub fn read_stats_csv(input: impl Read) -> Result<DatasetStats, PreprocessError> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(csv_err)?.clone();
    if headers.iter().collect::<Vec<_>>() != ["mu", "sigma"] {
        return Err(PreprocessError::InvalidConfig(
            "stats CSV header must be mu,sigma".into(),
        ));
    }
    let row = r
        .records()
        .next()
        .ok_or_else(|| PreprocessError::InvalidConfig("stats CSV has no data row".into()))?
        .map_err(csv_err)?;
    let parse = |i: usize| -> Result<f64, PreprocessError> {
        row.get(i)
            .and_then(|s| s.trim().parse::<f64>().ok())
            .ok_or_else(|| PreprocessError::InvalidConfig("unparseable stats value".into()))
    };
    let stats = DatasetStats {
        mu: parse(0)?,
        sigma: parse(1)?,
    };
    if !(stats.sigma > 0.0) || !stats.mu.is_finite() {
        return Err(PreprocessError::DegenerateDataset);
    }
    Ok(stats)
}

fn csv_err(e: csv::Error) -> PreprocessError {
    PreprocessError::InvalidConfig(format!("csv: {e}"))
}
