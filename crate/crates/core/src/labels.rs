//! CAC label transforms: clip, log, normalize, and the matching threshold
//! mapping used for the binary "CAC above threshold" decision.

use serde::{Deserialize, Serialize};

pub const DEFAULT_CLIP_MAX: f64 = 2000.0;
pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LabelError {
    #[error("need at least two scores to fit a label transform, got {0}")]
    TooFewScores(usize),
    #[error("log-domain labels have zero variance")]
    DegenerateLabels,
    #[error("calcium scores must be nonnegative and finite, got {0}")]
    NegativeScore(f64),
    #[error("invalid label transform parameters: {0}")]
    InvalidParameters(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelTransform {
    pub clip_max: f64,
    pub epsilon: f64,
    pub mu_log: f64,
    pub sigma_log: f64,
}

/// A raw CAC threshold together with its image in the normalized log domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformedThreshold {
    pub raw: f64,
    pub transformed: f64,
}

fn check_score(y: f64) -> Result<f64, LabelError> {
    if y >= 0.0 && y.is_finite() {
        Ok(y)
    } else {
        Err(LabelError::NegativeScore(y))
    }
}

impl LabelTransform {
    /// Fits `mu_log` and `sigma_log` as the mean and population standard
    /// deviation of `ln(min(y, clip_max) + epsilon)` over `scores`.
    pub fn fit(scores: &[f64], clip_max: f64, epsilon: f64) -> Result<Self, LabelError> {
        if !(clip_max > 0.0) || !(epsilon > 0.0) {
            return Err(LabelError::InvalidParameters(format!(
                "clip_max {clip_max} and epsilon {epsilon} must be positive"
            )));
        }
        if scores.len() < 2 {
            return Err(LabelError::TooFewScores(scores.len()));
        }
        let logs = scores
            .iter()
            .map(|&y| check_score(y).map(|y| (y.min(clip_max) + epsilon).ln()))
            .collect::<Result<Vec<_>, _>>()?;
        let n = logs.len() as f64;
        let mu_log = logs.iter().sum::<f64>() / n;
        let var = logs
            .iter()
            .map(|l| (l - mu_log) * (l - mu_log))
            .sum::<f64>()
            / n;
        let sigma_log = var.sqrt();
        if !(sigma_log > 0.0) {
            return Err(LabelError::DegenerateLabels);
        }
        Ok(Self {
            clip_max,
            epsilon,
            mu_log,
            sigma_log,
        })
    }

    pub fn fit_default(scores: &[f64]) -> Result<Self, LabelError> {
        Self::fit(scores, DEFAULT_CLIP_MAX, DEFAULT_EPSILON)
    }

    pub fn validate(&self) -> Result<(), LabelError> {
        let ok = self.clip_max > 0.0
            && self.epsilon > 0.0
            && self.sigma_log > 0.0
            && self.mu_log.is_finite()
            && self.sigma_log.is_finite()
            && self.clip_max.is_finite();
        if ok {
            Ok(())
        } else {
            Err(LabelError::InvalidParameters(format!("{self:?}")))
        }
    }

    pub fn transform(&self, y: f64) -> Result<f64, LabelError> {
        let y = check_score(y)?;
        Ok(((y.min(self.clip_max) + self.epsilon).ln() - self.mu_log) / self.sigma_log)
    }

    /// Maps a normalized log-domain value back to CAC units, clamped to
    /// `[0, clip_max]`.
    pub fn inverse_transform(&self, yp: f64) -> f64 {
        let raw = (yp * self.sigma_log + self.mu_log).exp() - self.epsilon;
        if raw.is_nan() {
            return 0.0;
        }
        raw.clamp(0.0, self.clip_max)
    }

    /// Threshold mapping. Unlike labels, thresholds are not clipped.
    pub fn transform_threshold(&self, th: f64) -> Result<TransformedThreshold, LabelError> {
        let th = check_score(th)?;
        Ok(TransformedThreshold {
            raw: th,
            transformed: ((th + self.epsilon).ln() - self.mu_log) / self.sigma_log,
        })
    }
}

/// `true` when a normalized value lies strictly above the threshold.
pub fn classify(y_t: f64, th: &TransformedThreshold) -> bool {
    y_t > th.transformed
}

/// A prediction is correct when it falls on the same side of the threshold
/// as its label.
pub fn agrees(pred_t: f64, label_t: f64, th: &TransformedThreshold) -> bool {
    classify(pred_t, th) == classify(label_t, th)
}
