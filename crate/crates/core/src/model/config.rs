use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::ModelError;

/// Bottleneck width multiplier of the 1x1 convolution in a dense layer.
pub const BOTTLENECK_FACTOR: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseNetConfig {
    pub input_dim: usize,
    pub init_channels: usize,
    pub growth_rate: usize,
    pub block_layers: Vec<usize>,
    pub compression: f64,
    #[serde(default = "default_head_hidden")]
    pub head_hidden: usize,
    #[serde(default = "default_true")]
    pub use_batchnorm: bool,
}

fn default_head_hidden() -> usize {
    64
}

fn default_true() -> bool {
    true
}

impl Default for DenseNetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Shape of the activation after a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageShape {
    pub channels: usize,
    pub side: usize,
}

impl DenseNetConfig {
    /// DenseNet-121 feature extractor at 1024x1024 input.
    pub fn full() -> Self {
        Self {
            input_dim: 1024,
            init_channels: 64,
            growth_rate: 32,
            block_layers: vec![6, 12, 24, 16],
            compression: 0.5,
            head_hidden: 64,
            use_batchnorm: true,
        }
    }

    /// Small network for 64x64 inputs.
    pub fn desk() -> Self {
        Self {
            input_dim: 64,
            init_channels: 16,
            growth_rate: 8,
            block_layers: vec![2, 2, 2],
            compression: 0.5,
            head_hidden: 64,
            use_batchnorm: true,
        }
    }

    pub fn bottleneck_channels(&self) -> usize {
        BOTTLENECK_FACTOR * self.growth_rate
    }

    /// Channel count after each transition's compression.
    fn compress(&self, channels: usize) -> usize {
        (self.compression * channels as f64).floor() as usize
    }

    /// Input shape of each dense block and the shape of the final feature maps.
    pub fn stage_shapes(&self) -> Result<(Vec<StageShape>, StageShape), ModelError> {
        self.validate_fields()?;
        let stem_side = (self.input_dim - 1) / 2 + 1;
        let mut side = stem_side / 2;
        if side == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "input_dim {} too small for the stem",
                self.input_dim
            )));
        }
        let mut channels = self.init_channels;
        let mut blocks = Vec::with_capacity(self.block_layers.len());
        for (b, &layers) in self.block_layers.iter().enumerate() {
            blocks.push(StageShape { channels, side });
            channels += layers * self.growth_rate;
            if b + 1 < self.block_layers.len() {
                channels = self.compress(channels);
                if channels == 0 {
                    return Err(ModelError::InvalidConfig(format!(
                        "transition {b} compresses to zero channels"
                    )));
                }
                if side < 2 {
                    return Err(ModelError::InvalidConfig(format!(
                        "feature maps shrink below 1x1 before block {}",
                        b + 1
                    )));
                }
                side /= 2;
            }
        }
        Ok((blocks, StageShape { channels, side }))
    }

    /// Length of the pooled feature vector fed to the head.
    pub fn feature_len(&self) -> Result<usize, ModelError> {
        Ok(self.stage_shapes()?.1.channels)
    }

    fn validate_fields(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.input_dim == 0
            || self.init_channels == 0
            || self.growth_rate == 0
            || self.head_hidden == 0
        {
            return bad("dimensions, channels, growth and head width must be positive");
        }
        if self.block_layers.is_empty() || self.block_layers.contains(&0) {
            return bad("block_layers must be a nonempty list of positive integers");
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return bad("compression must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.stage_shapes().map(|_| ())
    }

    /// Every parameter tensor in canonical order with its shape.
    pub fn param_shapes(&self) -> Result<IndexMap<String, Vec<usize>>, ModelError> {
        let (blocks, last) = self.stage_shapes()?;
        let mut shapes = IndexMap::new();
        let bn = |shapes: &mut IndexMap<String, Vec<usize>>, prefix: &str, c: usize| {
            if self.use_batchnorm {
                for field in ["weight", "bias", "running_mean", "running_var"] {
                    shapes.insert(format!("{prefix}.{field}"), vec![c]);
                }
            }
        };
        shapes.insert("stem.conv.weight".into(), vec![self.init_channels, 1, 7, 7]);
        bn(&mut shapes, "stem.bn", self.init_channels);
        let g = self.growth_rate;
        let bottleneck = self.bottleneck_channels();
        for (b, (&layers, stage)) in self.block_layers.iter().zip(&blocks).enumerate() {
            let mut c = stage.channels;
            for l in 0..layers {
                let p = format!("block{b}.layer{l}");
                bn(&mut shapes, &format!("{p}.bn1"), c);
                shapes.insert(format!("{p}.conv1.weight"), vec![bottleneck, c, 1, 1]);
                bn(&mut shapes, &format!("{p}.bn2"), bottleneck);
                shapes.insert(format!("{p}.conv2.weight"), vec![g, bottleneck, 3, 3]);
                c += g;
            }
            if b + 1 < self.block_layers.len() {
                let p = format!("transition{b}");
                bn(&mut shapes, &format!("{p}.bn"), c);
                shapes.insert(format!("{p}.conv.weight"), vec![self.compress(c), c, 1, 1]);
            }
        }
        bn(&mut shapes, "final_bn", last.channels);
        shapes.insert(
            "head.fc1.weight".into(),
            vec![self.head_hidden, last.channels],
        );
        shapes.insert("head.fc1.bias".into(), vec![self.head_hidden]);
        shapes.insert("head.fc2.weight".into(), vec![1, self.head_hidden]);
        shapes.insert("head.fc2.bias".into(), vec![1]);
        Ok(shapes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    #[default]
    None,
    /// Only the last dense block, the final normalization and the head learn.
    LastBlockAndHead,
}

impl FreezePolicy {
    pub fn is_trainable(self, name: &str, cfg: &DenseNetConfig) -> bool {
        match self {
            FreezePolicy::None => true,
            FreezePolicy::LastBlockAndHead => {
                let last = format!("block{}.", cfg.block_layers.len() - 1);
                name.starts_with(&last)
                    || name.starts_with("final_bn.")
                    || name.starts_with("head.")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub freeze_policy: FreezePolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            learning_rate: 0.0003,
            weight_decay: 0.0001,
            batch_size: 4,
            seed: 0,
            freeze_policy: FreezePolicy::None,
        }
    }
}

impl TrainConfig {
    /// Checks a user-supplied configuration: the learning rate must be
    /// strictly positive.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.validate_runnable()?;
        if !(self.learning_rate > 0.0) {
            return Err(ModelError::InvalidConfig(
                "learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }

    /// The weaker check the training loop itself needs. A zero learning rate
    /// is allowed here so that a run can refresh batch-norm running moments
    /// without touching any weight.
    pub fn validate_runnable(&self) -> Result<(), ModelError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ModelError::InvalidConfig(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::InvalidConfig(
                "learning_rate must be finite and nonnegative".into(),
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(ModelError::InvalidConfig(
                "weight_decay must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}
