use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{
    confusion_at_threshold, diagnostic_metrics, kfold_split, rauc, MetricsError, ScoredSample,
};
use crate::image::RealImage;
use crate::labels::LabelTransform;
use crate::model::{init_model, predict, train, DenseNetConfig, ModelParams, TrainConfig};
use crate::preprocess::{compute_dataset_stats, standardize, DatasetStats, InputTensor};
use crate::rng::{derive_seed, Stream};

/// One cross-validation item: a prepared (cropped, not yet standardized)
/// image and its true score.
#[derive(Debug, Clone)]
pub struct CvItem {
    pub id: String,
    pub image: RealImage,
    pub truth_cac: f64,
}

/// Everything a trainer sees for one fold. Held-out labels are deliberately
/// absent.
pub struct FoldInput {
    /// Zero-based fold index.
    pub fold: usize,
    /// Standardized training inputs with transformed targets.
    pub train: Vec<(InputTensor, f64)>,
    pub held_out: Vec<InputTensor>,
    pub held_out_ids: Vec<String>,
    pub label_transform: LabelTransform,
    pub stats: DatasetStats,
}

/// Result of fitting one fold: held-out predictions in the normalized log
/// domain and, for parametric trainers, the fitted parameters.
pub struct FoldFit {
    pub predictions: Vec<f64>,
    pub params: Option<ModelParams>,
}

pub trait FoldTrainer {
    fn fit_predict(&self, input: &FoldInput) -> Result<FoldFit, MetricsError>;
}

/// The network trainer. Each fold is initialized from its own seed derived
/// from `init_seed`.
#[derive(Debug, Clone)]
pub struct DenseNetTrainer {
    pub densenet: DenseNetConfig,
    pub train: TrainConfig,
    pub init_seed: u64,
}

impl FoldTrainer for DenseNetTrainer {
    fn fit_predict(&self, input: &FoldInput) -> Result<FoldFit, MetricsError> {
        let init = init_model(
            &self.densenet,
            derive_seed(self.init_seed, Stream::Init, input.fold as u64),
        )?;
        let (params, _) = train(&input.train, &self.train, init)?;
        let predictions = predict(&params, &input.held_out, 16)?;
        Ok(FoldFit {
            predictions,
            params: Some(params),
        })
    }
}

/// Columns of the cross-validation report. Rates whose denominator is empty
/// on a fold are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    /// One-based fold number.
    pub fold: usize,
    pub accuracy: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub rauc: Option<f64>,
}

/// Column means over the folds, each taken over the folds where it is
/// defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanRow {
    pub accuracy: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub rauc: Option<f64>,
}

pub struct CvOutcome {
    pub folds: Vec<FoldReport>,
    pub mean: MeanRow,
    /// Fitted parameters per fold, if the trainer exposes them.
    pub models: Vec<Option<ModelParams>>,
    /// Held-out predictions for every item, in dataset order.
    pub predictions: Vec<ScoredSample>,
    pub fold_indices: Vec<Vec<usize>>,
    pub rauc_grid: Vec<f64>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// k-fold cross-validation. For each fold the label transform and the
/// dataset statistics are fitted on the training portion only, the trainer
/// fits and predicts, and the held-out fold is scored at a CAC threshold of 0.
pub fn cross_validate(
    dataset: &[CvItem],
    k: usize,
    seed: u64,
    rauc_grid: &[f64],
    trainer: &dyn FoldTrainer,
) -> Result<CvOutcome, MetricsError> {
    let fold_indices = kfold_split(dataset.len(), k, seed)?;
    let mut folds = Vec::with_capacity(k);
    let mut models = Vec::with_capacity(k);
    let mut predictions: Vec<Option<ScoredSample>> = vec![None; dataset.len()];
    for (f, held) in fold_indices.iter().enumerate() {
        let mut is_held = vec![false; dataset.len()];
        held.iter().for_each(|&i| is_held[i] = true);
        let train_items: Vec<&CvItem> = dataset
            .iter()
            .zip(&is_held)
            .filter(|(_, &h)| !h)
            .map(|(d, _)| d)
            .collect();

        let truths: Vec<f64> = train_items.iter().map(|d| d.truth_cac).collect();
        let lt = LabelTransform::fit_default(&truths)?;
        let images: Vec<RealImage> = train_items.iter().map(|d| d.image.clone()).collect();
        let stats = compute_dataset_stats(&images)?;
        let train_set = train_items
            .iter()
            .map(|d| Ok((standardize(&d.image, &stats), lt.transform(d.truth_cac)?)))
            .collect::<Result<Vec<_>, MetricsError>>()?;
        let input = FoldInput {
            fold: f,
            train: train_set,
            held_out: held
                .iter()
                .map(|&i| standardize(&dataset[i].image, &stats))
                .collect(),
            held_out_ids: held.iter().map(|&i| dataset[i].id.clone()).collect(),
            label_transform: lt.clone(),
            stats,
        };
        let fit = trainer.fit_predict(&input)?;
        if fit.predictions.len() != held.len() {
            return Err(MetricsError::InvalidArgument(format!(
                "trainer returned {} predictions for {} held-out items",
                fit.predictions.len(),
                held.len()
            )));
        }
        let scored: Vec<ScoredSample> = held
            .iter()
            .zip(&fit.predictions)
            .map(|(&i, &p)| ScoredSample::new(dataset[i].id.clone(), p, dataset[i].truth_cac))
            .collect();
        let decision = lt.transform_threshold(0.0)?;
        let m = diagnostic_metrics(&confusion_at_threshold(&scored, &decision, 0.0));
        let r = match rauc(&scored, rauc_grid) {
            Ok(v) => Some(v),
            Err(MetricsError::AllGridDegenerate) => None,
            Err(e) => return Err(e),
        };
        folds.push(FoldReport {
            fold: f + 1,
            accuracy: m.accuracy,
            balanced_accuracy: m.balanced_accuracy,
            sensitivity: m.sensitivity,
            specificity: m.specificity,
            rauc: r,
        });
        for (&i, s) in held.iter().zip(scored) {
            predictions[i] = Some(s);
        }
        models.push(fit.params);
    }
    let mean = MeanRow {
        accuracy: mean_of(folds.iter().map(|r| r.accuracy)),
        balanced_accuracy: mean_of(folds.iter().map(|r| r.balanced_accuracy)),
        sensitivity: mean_of(folds.iter().map(|r| r.sensitivity)),
        specificity: mean_of(folds.iter().map(|r| r.specificity)),
        rauc: mean_of(folds.iter().map(|r| r.rauc)),
    };
    Ok(CvOutcome {
        folds,
        mean,
        models,
        predictions: predictions
            .into_iter()
            .map(|p| p.expect("every index is held out once"))
            .collect(),
        fold_indices,
        rauc_grid: rauc_grid.to_vec(),
    })
}

pub const REPORT_COLUMNS: [&str; 6] = [
    "fold",
    "accuracy",
    "balanced_accuracy",
    "sensitivity",
    "specificity",
    "rauc",
];

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per fold followed by a `Mean` row; absent values are empty cells.
pub fn write_fold_reports_csv(outcome: &CvOutcome, out: impl Write) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_COLUMNS)?;
    for r in &outcome.folds {
        w.write_record([
            r.fold.to_string(),
            cell(r.accuracy),
            cell(r.balanced_accuracy),
            cell(r.sensitivity),
            cell(r.specificity),
            cell(r.rauc),
        ])?;
    }
    let m = &outcome.mean;
    w.write_record([
        "Mean".to_string(),
        cell(m.accuracy),
        cell(m.balanced_accuracy),
        cell(m.sensitivity),
        cell(m.specificity),
        cell(m.rauc),
    ])?;
    w.flush()?;
    Ok(())
}
