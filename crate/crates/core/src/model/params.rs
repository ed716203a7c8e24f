use std::sync::atomic::{AtomicU64, Ordering};

use indexmap::IndexMap;
use rand_distr::{Distribution, Normal};

use super::config::DenseNetConfig;
use super::ModelError;
use crate::rng::{stream_rng, Stream};

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Named weight tensors of the regressor plus the configuration they belong to.
///
/// Every mutation through the methods below assigns a new version stamp, which
/// forward traces record so stale traces can be detected.
#[derive(Debug, Clone)]
pub struct ModelParams {
    cfg: DenseNetConfig,
    tensors: IndexMap<String, Tensor>,
    pub rng_seed: u64,
    stamp: u64,
}

/// Equality is over configuration and tensor contents only.
impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| {
                    na == nb
                        && a.shape == b.shape
                        && a.data
                            .iter()
                            .zip(&b.data)
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }
}

pub(crate) fn is_bn_name(name: &str) -> bool {
    name.split('.')
        .any(|seg| seg.starts_with("bn") || seg == "final_bn")
}

/// Whether weight decay applies: conv kernels and fully connected weights.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight") && !is_bn_name(name)
}

/// Running batch-norm moments are state, not learnable parameters.
pub fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

impl ModelParams {
    /// Builds parameters from explicit tensors, checking them against `cfg`.
    pub fn from_tensors(
        cfg: DenseNetConfig,
        tensors: IndexMap<String, Tensor>,
        rng_seed: u64,
    ) -> Result<Self, ModelError> {
        let expected = cfg.param_shapes()?;
        if expected.len() != tensors.len() {
            return Err(ModelError::ShapeMismatchWithConfig(format!(
                "config expects {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((en, es), (name, t)) in expected.iter().zip(&tensors) {
            if en != name || es != &t.shape {
                return Err(ModelError::ShapeMismatchWithConfig(format!(
                    "expected {en} {es:?}, found {name} {:?}",
                    t.shape
                )));
            }
            if t.data.len() != es.iter().product::<usize>() {
                return Err(ModelError::ShapeMismatchWithConfig(format!(
                    "{name} has wrong length"
                )));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite(name.clone()));
            }
        }
        Ok(Self {
            cfg,
            tensors,
            rng_seed,
            stamp: fresh_stamp(),
        })
    }

    pub fn config(&self) -> &DenseNetConfig {
        &self.cfg
    }

    pub fn stamp(&self) -> u64 {
        self.stamp
    }

    pub fn tensors(&self) -> &IndexMap<String, Tensor> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub(crate) fn tensor(&self, name: &str) -> &Tensor {
        self.tensors.get(name).unwrap_or_else(|| {
            panic!("parameter {name} missing; params were validated against the config")
        })
    }

    /// Mutable access to one tensor; bumps the version stamp.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.stamp = fresh_stamp();
        self.tensors.get_mut(name)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.stamp = fresh_stamp();
        self.tensors.iter_mut()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| !is_running_stat(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Rounds every value to the nearest `f32`, the precision weights are
    /// stored at.
    pub fn round_to_f32(&mut self) {
        for (_, t) in self.iter_mut() {
            for v in &mut t.data {
                *v = f64::from(*v as f32);
            }
        }
    }
}

/// He-normal convolution and hidden-layer weights, unit batch-norm scale,
/// zero shifts and biases. Values are rounded to `f32` so that saved weights
/// reload bit-exactly.
pub fn init_model(cfg: &DenseNetConfig, seed: u64) -> Result<ModelParams, ModelError> {
    let shapes = cfg.param_shapes()?;
    let mut tensors = IndexMap::with_capacity(shapes.len());
    for (i, (name, shape)) in shapes.into_iter().enumerate() {
        let t =
            if name.ends_with(".running_var") || (is_bn_name(&name) && name.ends_with(".weight")) {
                Tensor::filled(&shape, 1.0)
            } else if name.ends_with(".bias") || name.ends_with(".running_mean") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                // The linear output layer gets unit gain; everything feeding a ReLU gets gain 2.
                let gain = if name == "head.fc2.weight" { 1.0 } else { 2.0 };
                let std = (gain / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let mut rng = stream_rng(seed, Stream::Init, i as u64);
                let mut t = Tensor::zeros(&shape);
                for v in &mut t.data {
                    *v = f64::from(normal.sample(&mut rng) as f32);
                }
                t
            };
        tensors.insert(name, t);
    }
    ModelParams::from_tensors(cfg.clone(), tensors, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = DenseNetConfig::desk();
        let a = init_model(&cfg, 42).unwrap();
        let b = init_model(&cfg, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.stamp(), b.stamp());
        let c = init_model(&cfg, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_conventions() {
        let p = init_model(&DenseNetConfig::desk(), 1).unwrap();
        assert!(p
            .get("stem.bn.weight")
            .unwrap()
            .data
            .iter()
            .all(|&v| v == 1.0));
        assert!(p
            .get("stem.bn.bias")
            .unwrap()
            .data
            .iter()
            .all(|&v| v == 0.0));
        assert!(p
            .get("head.fc1.bias")
            .unwrap()
            .data
            .iter()
            .all(|&v| v == 0.0));
        assert!(p
            .get("head.fc2.bias")
            .unwrap()
            .data
            .iter()
            .all(|&v| v == 0.0));
        let w = &p.get("stem.conv.weight").unwrap().data;
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var - 2.0 / 49.0).abs() < 0.3 * 2.0 / 49.0, "var {var}");
        assert!(p
            .tensors()
            .values()
            .flat_map(|t| &t.data)
            .all(|&v| f64::from(v as f32) == v));
    }

    #[test]
    fn full_preset_head_takes_1024_features() {
        let p = init_model(&DenseNetConfig::full(), 0).unwrap();
        assert_eq!(p.get("head.fc1.weight").unwrap().shape, vec![64, 1024]);
        // DenseNet-121 without its classifier has ~6.95M parameters.
        let n = p.num_parameters();
        assert!(n > 6_900_000 && n < 7_100_000, "{n}");
    }

    #[test]
    fn decay_selection() {
        assert!(decays("stem.conv.weight"));
        assert!(decays("head.fc1.weight"));
        assert!(!decays("head.fc1.bias"));
        assert!(!decays("block0.layer1.bn2.weight"));
        assert!(!decays("final_bn.weight"));
        assert!(!decays("transition0.bn.bias"));
    }
}
