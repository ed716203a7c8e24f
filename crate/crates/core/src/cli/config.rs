//! Run configuration: TOML with one section per module. A named preset
//! supplies every default; the user file is merged over it key by key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::metrics::DEFAULT_RAUC_GRID;
use crate::model::{DenseNetConfig, TrainConfig};
use crate::preprocess::PreprocessConfig;
use crate::survival::CoxOptions;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 64x64 inputs and a small network; trains in about a minute.
    #[default]
    Desk,
    /// 1024x1024 inputs and the DenseNet-121 layout.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    /// True-score threshold defining the positive class.
    pub truth_threshold: f64,
    /// Predicted-score threshold of the classification rule.
    pub decision_threshold: f64,
    pub rauc_grid: Vec<f64>,
    pub calibration_edges: Vec<f64>,
    pub ci_level: f64,
    pub bootstrap_resamples: usize,
    pub folds: usize,
    pub train_fraction: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            truth_threshold: 0.0,
            decision_threshold: 0.0,
            rauc_grid: DEFAULT_RAUC_GRID.to_vec(),
            calibration_edges: vec![0.0, 100.0, 400.0],
            ci_level: 0.95,
            bootstrap_resamples: 1000,
            folds: 5,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurvivalSection {
    /// Covariate whose distinct values define the Kaplan-Meier groups.
    pub group_by: String,
    /// Horizon for the reported cumulative event estimates.
    pub horizon_years: f64,
    pub bivariate_with: String,
    pub cox: CoxOptions,
}

impl Default for SurvivalSection {
    fn default() -> Self {
        Self {
            group_by: "ai_cac_category".into(),
            horizon_years: 5.0,
            bivariate_with: "esc_class".into(),
            cox: CoxOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub cohort: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// The single source of randomness; copied into the synth and train
    /// sections and used for the split, fold and bootstrap streams.
    pub seed: u64,
    pub preprocess: PreprocessConfig,
    pub model: DenseNetConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub metrics: MetricsSection,
    pub survival: SurvivalSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (preprocess, model, epochs) = match preset {
            Preset::Desk => (PreprocessConfig::desk(), DenseNetConfig::desk(), 30),
            Preset::Full => (
                PreprocessConfig::default(),
                DenseNetConfig::full(),
                TrainConfig::default().epochs,
            ),
        };
        Self {
            preset,
            seed: 0,
            preprocess,
            model,
            train: TrainConfig {
                epochs,
                ..TrainConfig::default()
            },
            synth: SynthConfig::default(),
            metrics: MetricsSection::default(),
            survival: SurvivalSection::default(),
            paths: PathsSection::default(),
        }
    }

    /// Parses a user file over the defaults of the preset it names (desk if
    /// none). Unknown keys are rejected with their name.
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
        let preset = match user.get("preset") {
            Some(v) => Preset::deserialize(v.clone()).map_err(|e| format!("preset: {e}"))?,
            None => Preset::default(),
        };
        let mut merged = toml::Table::try_from(Self::preset(preset)).map_err(|e| e.to_string())?;
        merge(&mut merged, user);
        let mut cfg = Self::deserialize(toml::Value::Table(merged)).map_err(|e| e.to_string())?;
        cfg.propagate_seed();
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        match path {
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                Self::from_toml(&text).map_err(|e| format!("{}: {e}", p.display()))
            }
            None => Self::from_toml(""),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.propagate_seed();
        self
    }

    fn propagate_seed(&mut self) {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<(), String> {
        self.preprocess
            .validate()
            .map_err(|e| format!("preprocess: {e}"))?;
        self.model.validate().map_err(|e| format!("model: {e}"))?;
        self.train.validate().map_err(|e| format!("train: {e}"))?;
        self.synth.validate().map_err(|e| format!("synth: {e}"))?;
        if self.model.input_dim != self.preprocess.crop_dim {
            return Err(format!(
                "model.input_dim ({}) must equal preprocess.crop_dim ({})",
                self.model.input_dim, self.preprocess.crop_dim
            ));
        }
        let m = &self.metrics;
        if !(m.train_fraction > 0.0 && m.train_fraction < 1.0) {
            return Err("metrics.train_fraction must lie in (0, 1)".into());
        }
        if !(m.ci_level > 0.0 && m.ci_level < 1.0) || m.bootstrap_resamples == 0 {
            return Err(
                "metrics.ci_level must lie in (0, 1) and bootstrap_resamples be positive".into(),
            );
        }
        if m.folds < 2 {
            return Err("metrics.folds must be at least 2".into());
        }
        if m.rauc_grid.is_empty() {
            return Err("metrics.rauc_grid must not be empty".into());
        }
        if !(self.survival.horizon_years > 0.0) {
            return Err("survival.horizon_years must be positive".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

/// Recursively overlays `over` onto `base`: tables merge, everything else
/// replaces.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
