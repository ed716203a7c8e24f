//! Weights file: magic `CACW`, version u16, tensor count u32, then per tensor
//! a u16 name length, the UTF-8 name, a u8 rank, u32 dims and little-endian
//! f32 data. All integers are little-endian.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::config::DenseNetConfig;
use super::params::{ModelParams, Tensor};
use super::ModelError;
use crate::labels::LabelTransform;
use crate::preprocess::{DatasetStats, PreprocessConfig};

const MAGIC: &[u8; 4] = b"CACW";
const VERSION: u16 = 1;

/// JSON companion of a weights file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSidecar {
    pub densenet: DenseNetConfig,
    pub label_transform: LabelTransform,
    pub dataset_stats: DatasetStats,
    pub preprocess: PreprocessConfig,
    pub seed: u64,
}

pub fn save_weights(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.tensors().len() as u32).to_le_bytes());
    for (name, t) in params.tensors() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.buf.len() - self.pos < n {
            return Err(ModelError::TruncatedFile);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_weights(bytes: &[u8], cfg: &DenseNetConfig) -> Result<ModelParams, ModelError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| ModelError::BadMagic)? != MAGIC {
        return Err(ModelError::BadMagic);
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(ModelError::UnsupportedVersion(version));
    }
    let expected = cfg.param_shapes()?;
    let count = r.u32()? as usize;
    let mut tensors = IndexMap::with_capacity(count);
    for _ in 0..count {
        let name_len = usize::from(r.u16()?);
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| ModelError::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = usize::from(r.take(1)?[0]);
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        // Check against the config before reading data, so a mismatched file
        // is reported as such rather than as truncated.
        match expected.get(&name) {
            Some(s) if *s == shape => {}
            Some(s) => {
                return Err(ModelError::ShapeMismatchWithConfig(format!(
                    "{name}: file has {shape:?}, config expects {s:?}"
                )))
            }
            None => {
                return Err(ModelError::ShapeMismatchWithConfig(format!(
                    "unexpected tensor {name}"
                )))
            }
        }
        let n: usize = shape.iter().product();
        let data = r
            .take(n.checked_mul(4).ok_or(ModelError::TruncatedFile)?)?
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        if tensors
            .insert(name.clone(), Tensor { shape, data })
            .is_some()
        {
            return Err(ModelError::Corrupt(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Corrupt(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    if count != expected.len() {
        return Err(ModelError::ShapeMismatchWithConfig(format!(
            "file holds {count} tensors, config expects {}",
            expected.len()
        )));
    }
    // Reorder to the canonical order if the file used another one.
    let ordered = expected
        .keys()
        .map(|k| {
            let t = tensors
                .swap_remove(k)
                .expect("every expected name was matched");
            (k.clone(), t)
        })
        .collect();
    ModelParams::from_tensors(cfg.clone(), ordered, 0)
}
