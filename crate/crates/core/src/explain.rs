//! Grad-CAM saliency over the final dense block's rectified feature maps,
//! plus 8-bit PGM export.

use std::io;
use std::path::{Path, PathBuf};

use crate::fsio::write_atomic;
use crate::image::RealImage;
use crate::model::{feature_gradients, forward, Mode, ModelError, ModelParams};
use crate::preprocess::{resize_bilinear, InputTensor};

#[derive(Debug, thiserror::Error)]
pub enum ExplainError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// Saliency in `[0, 1]` over the model input grid; the maximum is 1 unless
/// the map is identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    dim: usize,
    values: Vec<f64>,
}

impl SaliencyMap {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.dim + col]
    }

    /// Fraction of the total saliency inside the half-open pixel rectangle
    /// `[x, x+w) x [y, y+h)`; 0 for an all-zero map.
    pub fn mass_in(&self, x: usize, y: usize, w: usize, h: usize) -> f64 {
        let total: f64 = self.values.iter().sum();
        if total == 0.0 {
            return 0.0;
        }
        let mut inside = 0.0;
        for r in y..(y + h).min(self.dim) {
            for c in x..(x + w).min(self.dim) {
                inside += self.get(r, c);
            }
        }
        inside / total
    }
}

/// Scales a nonnegative map so its maximum is 1; an all-zero map is left
/// at zero.
fn normalize_max(values: &mut [f64]) {
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        values
            .iter_mut()
            .for_each(|v| *v = (*v / max).clamp(0.0, 1.0));
    }
}

/// Grad-CAM maps for a batch of inputs, evaluated in eval mode. The target
/// is the raw prediction (no label needed); channel weights are the spatial
/// means of its gradient with respect to the rectified final feature maps.
pub fn gradcam_batch(
    params: &ModelParams,
    inputs: &[InputTensor],
) -> Result<Vec<SaliencyMap>, ExplainError> {
    let dim = params.config().input_dim;
    if let Some(bad) = inputs.iter().find(|t| t.dim() != dim) {
        return Err(ExplainError::ShapeMismatch(format!(
            "input is {}x{0}, model expects {dim}x{dim}",
            bad.dim()
        )));
    }
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    let trace = forward(params, inputs, Mode::Eval)?;
    let grads = feature_gradients(params, &trace)?;
    let feats = trace.features();
    let (c, h, w) = (feats.c, feats.h, feats.w);
    let plane = h * w;
    let mut maps = Vec::with_capacity(inputs.len());
    for item in 0..inputs.len() {
        let base = item * c * plane;
        let mut raw = vec![0.0; plane];
        for ch in 0..c {
            let off = base + ch * plane;
            let weight = grads.data[off..off + plane].iter().sum::<f64>() / plane as f64;
            for (r, f) in raw.iter_mut().zip(&feats.data[off..off + plane]) {
                *r += weight * f;
            }
        }
        raw.iter_mut().for_each(|v| *v = v.max(0.0));
        let coarse = RealImage::new(h, w, raw).expect("finite by construction");
        let mut values = resize_bilinear(&coarse, dim).into_values();
        normalize_max(&mut values);
        maps.push(SaliencyMap { dim, values });
    }
    Ok(maps)
}

pub fn gradcam(params: &ModelParams, input: &InputTensor) -> Result<SaliencyMap, ExplainError> {
    Ok(gradcam_batch(params, std::slice::from_ref(input))?.remove(0))
}

/// 8-bit quantization: `round(255 * v)` for `v` in `[0, 1]`.
pub fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

fn pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// PGM bytes of the map alone.
pub fn map_pgm(map: &SaliencyMap) -> Vec<u8> {
    let px: Vec<u8> = map.values.iter().map(|&v| quantize(v)).collect();
    pgm(map.dim, map.dim, &px)
}

/// PGM bytes of the base image (min-max scaled to [0, 1]) and the map side
/// by side.
pub fn overlay_pgm(map: &SaliencyMap, base: &InputTensor) -> Result<Vec<u8>, ExplainError> {
    let d = map.dim;
    if base.dim() != d {
        return Err(ExplainError::ShapeMismatch(format!(
            "base is {}x{0}, map is {d}x{d}",
            base.dim()
        )));
    }
    let (lo, hi) = base
        .values()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let span = hi - lo;
    let mut px = Vec::with_capacity(2 * d * d);
    for r in 0..d {
        for c in 0..d {
            let v = base.values()[r * d + c];
            px.push(quantize(if span > 0.0 { (v - lo) / span } else { 0.0 }));
        }
        for c in 0..d {
            px.push(quantize(map.get(r, c)));
        }
    }
    Ok(pgm(2 * d, d, &px))
}

/// Writes `<id>.map.pgm` and `<id>.overlay.pgm` into `dir`, returning both
/// paths.
pub fn export_saliency(
    map: &SaliencyMap,
    base: &InputTensor,
    dir: &Path,
    id: &str,
) -> Result<(PathBuf, PathBuf), ExplainError> {
    let overlay = overlay_pgm(map, base)?;
    let map_path = dir.join(format!("{id}.map.pgm"));
    let overlay_path = dir.join(format!("{id}.overlay.pgm"));
    for (path, bytes) in [(&map_path, map_pgm(map)), (&overlay_path, overlay)] {
        write_atomic(path, &bytes).map_err(|source| ExplainError::Io {
            path: path.clone(),
            source,
        })?;
    }
    Ok((map_path, overlay_path))
}
