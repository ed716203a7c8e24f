//! Diagnostic-accuracy statistics: ROC AUC with bootstrap intervals,
//! confusion-derived rates, precision-recall points, regression AUC over a
//! truth-threshold grid, calibration tables and k-fold cross-validation.

mod cv;

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::labels::{LabelTransform, TransformedThreshold};
use crate::rng::{stream_rng, Stream};

pub use cv::{
    cross_validate, write_fold_reports_csv, CvItem, CvOutcome, DenseNetTrainer, FoldFit, FoldInput,
    FoldReport, FoldTrainer, MeanRow, REPORT_COLUMNS,
};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("both classes are needed: {positives} positives, {negatives} negatives")]
    OneClassOnly { positives: usize, negatives: usize },
    #[error("no positive samples")]
    NoPositives,
    #[error("no grid threshold leaves both classes present")]
    AllGridDegenerate,
    #[error("need at least {k} samples for {k} folds, got {n}")]
    TooFewSamples { n: usize, k: usize },
    #[error("empty sample set")]
    Empty,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite score for sample {0}")]
    NonFiniteScore(String),
    #[error(transparent)]
    Label(#[from] crate::labels::LabelError),
    #[error(transparent)]
    Preprocess(#[from] crate::preprocess::PreprocessError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A prediction in the normalized log domain next to the true score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: String,
    pub score: f64,
    pub truth_cac: f64,
}

impl ScoredSample {
    pub fn new(id: impl Into<String>, score: f64, truth_cac: f64) -> Self {
        Self {
            id: id.into(),
            score,
            truth_cac,
        }
    }
}

fn check_scores(samples: &[ScoredSample]) -> Result<(), MetricsError> {
    match samples.iter().find(|s| !s.score.is_finite()) {
        Some(s) => Err(MetricsError::NonFiniteScore(s.id.clone())),
        None => Ok(()),
    }
}

/// Area under the ROC curve for the rule `truth_cac > truth_th`, computed
/// exactly as the Mann-Whitney statistic with ties counted as one half.
pub fn roc_auc(samples: &[ScoredSample], truth_th: f64) -> Result<f64, MetricsError> {
    check_scores(samples)?;
    let labels: Vec<bool> = samples.iter().map(|s| s.truth_cac > truth_th).collect();
    let scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    auc_from(&scores, &labels)
}

/// Exact AUC of `scores` against boolean labels.
pub fn auc_from(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::OneClassOnly {
            positives,
            negatives,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the number of correctly ordered pairs, ties counting one.
    let mut twice_correct: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos_eq, mut neg_eq) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos_eq += 1;
            } else {
                neg_eq += 1;
            }
            j += 1;
        }
        twice_correct += pos_eq * (2 * neg_below + neg_eq);
        neg_below += neg_eq;
        i = j;
    }
    let twice_pairs = 2 * positives as u128 * negatives as u128;
    // Dividing the smaller of the two complementary counts and subtracting
    // from one keeps auc(s) + auc(-s) == 1 exactly in floating point.
    let wrong = twice_pairs - twice_correct;
    Ok(if twice_correct <= wrong {
        twice_correct as f64 / twice_pairs as f64
    } else {
        1.0 - wrong as f64 / twice_pairs as f64
    })
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap interval for the AUC. Each resample has its own
/// seeded stream, so the result does not depend on thread scheduling;
/// resamples with a single class are redrawn from the same stream.
pub fn auc_confidence_interval(
    samples: &[ScoredSample],
    truth_th: f64,
    level: f64,
    resamples: usize,
    seed: u64,
) -> Result<(f64, f64), MetricsError> {
    if !(level > 0.0 && level < 1.0) || resamples == 0 {
        return Err(MetricsError::InvalidArgument(
            "level must lie in (0,1) and resamples be positive".into(),
        ));
    }
    check_scores(samples)?;
    let labels: Vec<bool> = samples.iter().map(|s| s.truth_cac > truth_th).collect();
    let scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    auc_from(&scores, &labels)?;
    let n = samples.len();
    let mut aucs: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, Stream::Bootstrap, r as u64);
            let mut s = vec![0.0; n];
            let mut l = vec![false; n];
            loop {
                for k in 0..n {
                    let i = rng.gen_range(0..n);
                    s[k] = scores[i];
                    l[k] = labels[i];
                }
                if let Ok(a) = auc_from(&s, &l) {
                    return a;
                }
            }
        })
        .collect();
    aucs.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    Ok((
        quantile_sorted(&aucs, alpha / 2.0),
        quantile_sorted(&aucs, 1.0 - alpha / 2.0),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    fn add(&mut self, predicted: bool, truth: bool) {
        match (predicted, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }
}

/// Predicted positive iff `score > decision_th.transformed`; truly positive
/// iff `truth_cac > truth_th`.
pub fn confusion_at_threshold(
    samples: &[ScoredSample],
    decision_th: &TransformedThreshold,
    truth_th: f64,
) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for s in samples {
        c.add(s.score > decision_th.transformed, s.truth_cac > truth_th);
    }
    c
}

/// Rates derived from a confusion table; `None` where the denominator is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticMetrics {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub accuracy: Option<f64>,
    pub balanced_accuracy: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn diagnostic_metrics(c: &ConfusionCounts) -> DiagnosticMetrics {
    let sensitivity = ratio(c.tp, c.tp + c.fn_);
    let specificity = ratio(c.tn, c.tn + c.fp);
    DiagnosticMetrics {
        sensitivity,
        specificity,
        ppv: ratio(c.tp, c.tp + c.fp),
        npv: ratio(c.tn, c.tn + c.fn_),
        accuracy: ratio(c.tp + c.tn, c.total()),
        balanced_accuracy: sensitivity.zip(specificity).map(|(a, b)| (a + b) / 2.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    /// Samples scoring at or above this value are called positive.
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// One precision-recall point per distinct score, thresholds descending.
pub fn pr_curve(samples: &[ScoredSample], truth_th: f64) -> Result<Vec<PrPoint>, MetricsError> {
    check_scores(samples)?;
    let positives = samples.iter().filter(|s| s.truth_cac > truth_th).count();
    if positives == 0 {
        return Err(MetricsError::NoPositives);
    }
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut points = Vec::new();
    let (mut tp, mut called) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let th = sorted[i].score;
        while i < sorted.len() && sorted[i].score == th {
            tp += usize::from(sorted[i].truth_cac > truth_th);
            called += 1;
            i += 1;
        }
        points.push(PrPoint {
            threshold: th,
            recall: tp as f64 / positives as f64,
            precision: tp as f64 / called as f64,
        });
    }
    Ok(points)
}

pub const DEFAULT_RAUC_GRID: [f64; 3] = [0.0, 100.0, 400.0];

/// Regression AUC: the mean ROC AUC over the truth thresholds in `grid` at
/// which both classes are present.
pub fn rauc(samples: &[ScoredSample], grid: &[f64]) -> Result<f64, MetricsError> {
    check_scores(samples)?;
    let mut sum = 0.0;
    let mut used = 0usize;
    for &t in grid {
        match roc_auc(samples, t) {
            Ok(a) => {
                sum += a;
                used += 1;
            }
            Err(MetricsError::OneClassOnly { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(MetricsError::AllGridDegenerate);
    }
    Ok(sum / used as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    /// Human-readable stratum label, e.g. `<=0`, `(0,100]`, `>400`.
    pub stratum: String,
    pub mean_predicted_cac: f64,
    pub mean_true_cac: f64,
    pub count: usize,
}

fn stratum_index(edges: &[f64], v: f64) -> usize {
    edges.iter().position(|&e| v <= e).unwrap_or(edges.len())
}

fn stratum_label(edges: &[f64], i: usize) -> String {
    if i == 0 {
        format!("<={}", edges[0])
    } else if i == edges.len() {
        format!(">{}", edges[i - 1])
    } else {
        format!("({},{}]", edges[i - 1], edges[i])
    }
}

/// Mean predicted CAC (via the inverse label transform) against mean true
/// CAC within true-CAC strata. Edges `e0 < e1 < ...` define the strata
/// `<= e0`, `(e0, e1]`, ..., `> e_last`; empty strata are omitted.
pub fn calibration_table(
    samples: &[ScoredSample],
    lt: &LabelTransform,
    edges: &[f64],
) -> Result<Vec<CalibrationRow>, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    if edges.is_empty() || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(MetricsError::InvalidArgument(
            "strata edges must be nonempty and strictly ascending".into(),
        ));
    }
    check_scores(samples)?;
    let mut acc = vec![(0.0, 0.0, 0usize); edges.len() + 1];
    for s in samples {
        let a = &mut acc[stratum_index(edges, s.truth_cac)];
        a.0 += lt.inverse_transform(s.score);
        a.1 += s.truth_cac;
        a.2 += 1;
    }
    Ok(acc
        .iter()
        .enumerate()
        .filter(|(_, a)| a.2 > 0)
        .map(|(i, &(p, t, n))| CalibrationRow {
            stratum: stratum_label(edges, i),
            mean_predicted_cac: p / n as f64,
            mean_true_cac: t / n as f64,
            count: n,
        })
        .collect())
}

/// Seeded permutation of `0..n` cut into `k` parts whose sizes differ by at
/// most one (the first `n % k` parts are one longer).
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidArgument("k must be at least 1".into()));
    }
    if n < k {
        return Err(MetricsError::TooFewSamples { n, k });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut stream_rng(seed, Stream::Fold, 0));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(perm[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}

/// Seeded train/held-out split: a permutation of `0..n` whose first
/// `round(train_fraction * n)` entries (at least one on each side) form the
/// training part. Both parts are returned sorted.
pub fn train_test_split(
    n: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), MetricsError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(MetricsError::InvalidArgument(
            "train_fraction must lie in (0, 1)".into(),
        ));
    }
    if n < 2 {
        return Err(MetricsError::TooFewSamples { n, k: 2 });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut stream_rng(seed, Stream::Split, 0));
    let cut = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let (mut a, mut b) = (perm[..cut].to_vec(), perm[cut..].to_vec());
    a.sort_unstable();
    b.sort_unstable();
    Ok((a, b))
}

/// `(fpr, tpr)` points, one per distinct score with thresholds descending,
/// preceded by `(0, 0)`.
pub fn roc_curve(samples: &[ScoredSample], truth_th: f64) -> Result<Vec<(f64, f64)>, MetricsError> {
    check_scores(samples)?;
    let positives = samples.iter().filter(|s| s.truth_cac > truth_th).count();
    let negatives = samples.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::OneClassOnly {
            positives,
            negatives,
        });
    }
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let th = sorted[i].score;
        while i < sorted.len() && sorted[i].score == th {
            if sorted[i].truth_cac > truth_th {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / negatives as f64, tp as f64 / positives as f64));
    }
    Ok(points)
}

pub fn write_curve_csv(
    header: [&str; 2],
    points: &[(f64, f64)],
    out: impl Write,
) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for (a, b) in points {
        w.write_record([a.to_string(), b.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_calibration_csv(rows: &[CalibrationRow], out: impl Write) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
