//! One function per subcommand.

use std::collections::HashSet;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::dataset::{read_dicom, read_file, require_path, Dataset, OutDir};
use super::{
    fail, Classify, CliResult, DataArgs, EvaluateArgs, ExplainArgs, Failure, FreezeArg, RunConfig,
    SplitArg, SurvivalArgs, TrainArgs,
};
use crate::explain::{gradcam_batch, map_pgm, overlay_pgm};
use crate::labels::LabelTransform;
use crate::metrics::{
    auc_confidence_interval, calibration_table, confusion_at_threshold, cross_validate,
    diagnostic_metrics, pr_curve, rauc, roc_auc, roc_curve, train_test_split,
    write_calibration_csv, write_curve_csv, write_fold_reports_csv, ConfusionCounts, CvItem,
    DenseNetTrainer, DiagnosticMetrics, FoldReport, MeanRow, MetricsError, ScoredSample,
};
use crate::model::{
    init_model, load_weights, predict, save_weights, train_with_observer, FreezePolicy,
    ModelParams, ModelSidecar,
};
use crate::preprocess::{
    compute_dataset_stats, preprocess_pipeline, standardize, write_stats_csv, InputTensor,
};
use crate::survival::{
    cac_category, cox_fit, kaplan_meier, km_event_estimate, log_rank, read_cohort_csv, CoxResult,
    SubjectRecord, SurvivalError,
};
use crate::synth::{generate_samples, generate_survival, write_dataset, SynthError};

const PREDICT_CHUNK: usize = 16;

fn metrics_failure(e: &MetricsError) -> Failure {
    match e {
        MetricsError::OneClassOnly { .. }
        | MetricsError::NoPositives
        | MetricsError::AllGridDegenerate
        | MetricsError::TooFewSamples { .. }
        | MetricsError::Empty
        | MetricsError::NonFiniteScore(_) => Failure::Degenerate,
        MetricsError::Model(_) => Failure::Training,
        MetricsError::Io(_) => Failure::Io,
        _ => Failure::Config,
    }
}

fn metrics<T>(r: Result<T, MetricsError>) -> CliResult<T> {
    r.map_err(|e| {
        let kind = metrics_failure(&e);
        super::CliError {
            kind,
            error: e.into(),
        }
    })
}

fn survival_failure(e: &SurvivalError) -> Failure {
    match e {
        SurvivalError::EmptyCohort
        | SurvivalError::NoEvents
        | SurvivalError::ConstantCovariate(_)
        | SurvivalError::Diverged(_)
        | SurvivalError::SingularInformation
        | SurvivalError::NegativeStatistic(_) => Failure::Degenerate,
        SurvivalError::InvalidRecord { .. }
        | SurvivalError::UnknownCovariate(_)
        | SurvivalError::Format(_)
        | SurvivalError::Csv(_) => Failure::Config,
    }
}

fn survival_result<T>(r: Result<T, SurvivalError>) -> CliResult<T> {
    r.map_err(|e| {
        let kind = survival_failure(&e);
        super::CliError {
            kind,
            error: e.into(),
        }
    })
}

fn validated(cfg: &RunConfig) -> CliResult<()> {
    cfg.validate().or_else(|e| fail(Failure::Config, e))
}

// ---------------------------------------------------------------------------
// synth

pub fn synth(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    validated(cfg)?;
    let mut samples = generate_samples(&cfg.synth).or_fail(Failure::Config)?;
    let mut records: Vec<SubjectRecord> = samples.iter().map(|s| s.record.clone()).collect();
    generate_survival(&cfg.synth, &mut records).or_fail(Failure::Config)?;
    for (s, r) in samples.iter_mut().zip(records) {
        s.record = r;
    }
    write_dataset(&cfg.synth, &samples, out).map_err(|e| {
        let kind = if matches!(e, SynthError::Io { .. }) {
            Failure::Io
        } else {
            Failure::Config
        };
        super::CliError {
            kind,
            error: e.into(),
        }
    })?;
    // The dataset manifest written above already describes the directory.
    let mut dir = OutDir::create(out)?;
    dir.write("config.toml", cfg.to_toml().as_bytes())?;
    let positives = samples.iter().filter(|s| s.cac > 0.0).count();
    println!(
        "wrote {} samples ({positives} with CAC > 0) to {}",
        samples.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// model directories

const WEIGHTS: &str = "weights.bin";
const SIDECAR: &str = "model.json";

fn load_model(dir: &Path) -> CliResult<(ModelParams, ModelSidecar)> {
    let sidecar: ModelSidecar = serde_json::from_slice(&read_file(&dir.join(SIDECAR))?)
        .map_err(|e| anyhow::anyhow!("{}: {e}", dir.join(SIDECAR).display()))
        .or_fail(Failure::Config)?;
    let params = load_weights(&read_file(&dir.join(WEIGHTS))?, &sidecar.densenet)
        .map_err(|e| anyhow::anyhow!("{}: {e}", dir.join(WEIGHTS).display()))
        .or_fail(Failure::Io)?;
    Ok((params, sidecar))
}

#[derive(Serialize, Deserialize)]
struct SplitRow {
    id: String,
    split: String,
}

#[derive(Serialize)]
struct HistoryRow {
    epoch: usize,
    train_mae: f64,
}

// ---------------------------------------------------------------------------
// train

pub fn train(mut cfg: RunConfig, args: &TrainArgs, out: &Path) -> CliResult<()> {
    if let Some(f) = args.freeze {
        cfg.train.freeze_policy = match f {
            FreezeArg::None => FreezePolicy::None,
            FreezeArg::LastBlock => FreezePolicy::LastBlockAndHead,
        };
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    let init = match &args.init {
        Some(dir) => {
            let (params, sidecar) = load_model(dir)?;
            cfg.model = sidecar.densenet;
            Some(params)
        }
        None => None,
    };
    validated(&cfg)?;
    let data_dir = require_path(&args.data.data, &cfg.paths.data, "data")?;
    let ds = Dataset::load(&data_dir, &cfg.preprocess)?;
    let (train_idx, test_idx) = metrics(train_test_split(
        ds.len(),
        cfg.metrics.train_fraction,
        cfg.seed,
    ))?;

    let train_images: Vec<_> = train_idx.iter().map(|&i| ds.images[i].clone()).collect();
    let stats = compute_dataset_stats(&train_images).or_fail(Failure::Degenerate)?;
    let train_scores: Vec<f64> = train_idx.iter().map(|&i| ds.cac[i]).collect();
    let lt = LabelTransform::fit_default(&train_scores).or_fail(Failure::Degenerate)?;
    let train_set: Vec<(InputTensor, f64)> = train_idx
        .iter()
        .map(|&i| Ok((standardize(&ds.images[i], &stats), lt.transform(ds.cac[i])?)))
        .collect::<Result<_, crate::labels::LabelError>>()
        .or_fail(Failure::Degenerate)?;

    let init = match init {
        Some(p) => p,
        None => init_model(&cfg.model, cfg.seed).or_fail(Failure::Config)?,
    };
    log::info!(
        "training on {} of {} items for {} epochs ({} parameters)",
        train_set.len(),
        ds.len(),
        cfg.train.epochs,
        init.num_parameters()
    );
    let mut observer = |epoch: usize, loss: f64, _: &ModelParams| {
        log::info!("epoch {:3}  train MAE {loss:.6}", epoch + 1)
    };
    let (params, history) = train_with_observer(&train_set, &cfg.train, init, &mut observer)
        .or_fail(Failure::Training)?;

    let mut dir = OutDir::create(out)?;
    dir.write(WEIGHTS, &save_weights(&params))?;
    let sidecar = ModelSidecar {
        densenet: cfg.model.clone(),
        label_transform: lt.clone(),
        dataset_stats: stats,
        preprocess: cfg.preprocess,
        seed: cfg.seed,
    };
    dir.write_json(SIDECAR, &sidecar)?;
    dir.write_json("label_transform.json", &lt)?;
    let mut buf = Vec::new();
    write_stats_csv(&stats, &mut buf).or_fail(Failure::Io)?;
    dir.write("stats.csv", &buf)?;
    let rows: Vec<HistoryRow> = history
        .iter()
        .enumerate()
        .map(|(e, &l)| HistoryRow {
            epoch: e + 1,
            train_mae: l,
        })
        .collect();
    dir.write_rows("history.csv", &rows)?;
    let held: HashSet<usize> = test_idx.iter().copied().collect();
    let split: Vec<SplitRow> = ds
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| SplitRow {
            id: id.clone(),
            split: if held.contains(&i) { "test" } else { "train" }.into(),
        })
        .collect();
    dir.write_rows("split.csv", &split)?;
    dir.finish("train", &cfg)?;
    println!(
        "final train MAE {:.6}",
        history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Serialize)]
struct PredictionRow<'a> {
    id: &'a str,
    score: f64,
    predicted_cac: f64,
    truth_cac: f64,
}

#[derive(Serialize)]
struct AucInterval {
    level: f64,
    lower: f64,
    upper: f64,
    resamples: usize,
}

#[derive(Serialize)]
struct EvaluationReport {
    n: usize,
    positives: usize,
    negatives: usize,
    truth_threshold: f64,
    decision_threshold: f64,
    auc: f64,
    auc_ci: AucInterval,
    confusion: ConfusionCounts,
    #[serde(flatten)]
    metrics: DiagnosticMetrics,
    rauc: Option<f64>,
    rauc_grid: Vec<f64>,
}

#[derive(Serialize)]
struct MetricsRow {
    auc: f64,
    auc_ci_lower: f64,
    auc_ci_upper: f64,
    sensitivity: Option<f64>,
    specificity: Option<f64>,
    npv: Option<f64>,
    ppv: Option<f64>,
    accuracy: Option<f64>,
    balanced_accuracy: Option<f64>,
    rauc: Option<f64>,
}

fn read_id_list(path: &Path) -> CliResult<Vec<String>> {
    let text = String::from_utf8(read_file(path)?).or_fail(Failure::Config)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

fn selected_indices(args: &EvaluateArgs, model_dir: &Path, ds: &Dataset) -> CliResult<Vec<usize>> {
    let wanted: Vec<String> = match args.split {
        SplitArg::All => return Ok((0..ds.len()).collect()),
        SplitArg::Internal => {
            let bytes = read_file(&model_dir.join("split.csv"))?;
            let mut rd = csv::Reader::from_reader(bytes.as_slice());
            let rows: Vec<SplitRow> = rd
                .deserialize()
                .collect::<Result<_, _>>()
                .or_fail(Failure::Config)?;
            rows.into_iter()
                .filter(|r| r.split == "test")
                .map(|r| r.id)
                .collect()
        }
        SplitArg::FileList => match &args.ids {
            Some(p) => read_id_list(p)?,
            None => return fail(Failure::Config, "--split file-list needs --ids"),
        },
    };
    let pos: IndexMap<&str, usize> = ds
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    wanted
        .iter()
        .map(|id| match pos.get(id.as_str()) {
            Some(&i) => Ok(i),
            None => fail(Failure::Config, format!("id {id} is not in the dataset")),
        })
        .collect()
}

pub fn evaluate(cfg: &RunConfig, args: &EvaluateArgs, out: &Path) -> CliResult<()> {
    validated(cfg)?;
    let model_dir = require_path(&args.model, &cfg.paths.model, "model")?;
    let data_dir = require_path(&args.data.data, &cfg.paths.data, "data")?;
    let (params, sidecar) = load_model(&model_dir)?;
    let ds = Dataset::load(&data_dir, &sidecar.preprocess)?;
    let idx = selected_indices(args, &model_dir, &ds)?;
    if idx.is_empty() {
        return fail(Failure::Degenerate, "the evaluation set is empty");
    }
    let inputs: Vec<InputTensor> = idx
        .iter()
        .map(|&i| standardize(&ds.images[i], &sidecar.dataset_stats))
        .collect();
    let preds = predict(&params, &inputs, PREDICT_CHUNK).or_fail(Failure::Config)?;
    let samples: Vec<ScoredSample> = idx
        .iter()
        .zip(&preds)
        .map(|(&i, &p)| ScoredSample::new(ds.ids[i].clone(), p, ds.cac[i]))
        .collect();

    let m = &cfg.metrics;
    let lt = &sidecar.label_transform;
    let auc = metrics(roc_auc(&samples, m.truth_threshold))?;
    let (lower, upper) = metrics(auc_confidence_interval(
        &samples,
        m.truth_threshold,
        m.ci_level,
        m.bootstrap_resamples,
        cfg.seed,
    ))?;
    let th = lt
        .transform_threshold(m.decision_threshold)
        .or_fail(Failure::Config)?;
    let confusion = confusion_at_threshold(&samples, &th, m.truth_threshold);
    let diag = diagnostic_metrics(&confusion);
    let rauc_value = match rauc(&samples, &m.rauc_grid) {
        Ok(v) => Some(v),
        Err(MetricsError::AllGridDegenerate) => None,
        Err(e) => return metrics(Err(e)),
    };
    let positives = samples
        .iter()
        .filter(|s| s.truth_cac > m.truth_threshold)
        .count();
    let report = EvaluationReport {
        n: samples.len(),
        positives,
        negatives: samples.len() - positives,
        truth_threshold: m.truth_threshold,
        decision_threshold: m.decision_threshold,
        auc,
        auc_ci: AucInterval {
            level: m.ci_level,
            lower,
            upper,
            resamples: m.bootstrap_resamples,
        },
        confusion,
        metrics: diag,
        rauc: rauc_value,
        rauc_grid: m.rauc_grid.clone(),
    };

    let mut dir = OutDir::create(out)?;
    dir.write_json("report.json", &report)?;
    dir.write_rows(
        "metrics.csv",
        &[MetricsRow {
            auc,
            auc_ci_lower: lower,
            auc_ci_upper: upper,
            sensitivity: diag.sensitivity,
            specificity: diag.specificity,
            npv: diag.npv,
            ppv: diag.ppv,
            accuracy: diag.accuracy,
            balanced_accuracy: diag.balanced_accuracy,
            rauc: rauc_value,
        }],
    )?;
    let mut buf = Vec::new();
    metrics(write_curve_csv(
        ["fpr", "tpr"],
        &metrics(roc_curve(&samples, m.truth_threshold))?,
        &mut buf,
    ))?;
    dir.write("roc.csv", &buf)?;
    dir.write_rows("pr.csv", &metrics(pr_curve(&samples, m.truth_threshold))?)?;
    let mut buf = Vec::new();
    metrics(write_calibration_csv(
        &metrics(calibration_table(&samples, lt, &m.calibration_edges))?,
        &mut buf,
    ))?;
    dir.write("calibration.csv", &buf)?;
    let rows: Vec<PredictionRow> = samples
        .iter()
        .map(|s| PredictionRow {
            id: &s.id,
            score: s.score,
            predicted_cac: lt.inverse_transform(s.score),
            truth_cac: s.truth_cac,
        })
        .collect();
    dir.write_rows("predictions.csv", &rows)?;
    dir.finish("evaluate", cfg)?;
    println!(
        "AUC {auc:.4} ({:.0}% CI {lower:.4}-{upper:.4}) on {} items",
        100.0 * m.ci_level,
        samples.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// crossval

#[derive(Serialize)]
struct CrossvalReport<'a> {
    folds: &'a [FoldReport],
    mean: &'a MeanRow,
    rauc_grid: &'a [f64],
    fold_ids: Vec<Vec<&'a str>>,
}

pub fn crossval(cfg: &RunConfig, args: &DataArgs, out: &Path) -> CliResult<()> {
    validated(cfg)?;
    let data_dir = require_path(&args.data, &cfg.paths.data, "data")?;
    let ds = Dataset::load(&data_dir, &cfg.preprocess)?;
    let items: Vec<CvItem> = ds
        .ids
        .iter()
        .zip(&ds.cac)
        .zip(&ds.images)
        .map(|((id, &cac), img)| CvItem {
            id: id.clone(),
            image: img.clone(),
            truth_cac: cac,
        })
        .collect();
    let trainer = DenseNetTrainer {
        densenet: cfg.model.clone(),
        train: cfg.train,
        init_seed: cfg.seed,
    };
    let k = cfg.metrics.folds;
    log::info!("{k}-fold cross-validation over {} items", items.len());
    let outcome = metrics(cross_validate(
        &items,
        k,
        cfg.seed,
        &cfg.metrics.rauc_grid,
        &trainer,
    ))?;

    let mut dir = OutDir::create(out)?;
    let mut buf = Vec::new();
    metrics(write_fold_reports_csv(&outcome, &mut buf))?;
    dir.write("crossval.csv", &buf)?;
    let report = CrossvalReport {
        folds: &outcome.folds,
        mean: &outcome.mean,
        rauc_grid: &outcome.rauc_grid,
        fold_ids: outcome
            .fold_indices
            .iter()
            .map(|f| f.iter().map(|&i| ds.ids[i].as_str()).collect())
            .collect(),
    };
    dir.write_json("crossval.json", &report)?;
    dir.write_rows("predictions.csv", &outcome.predictions)?;
    dir.finish("crossval", cfg)?;
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "mean accuracy {}, balanced accuracy {}, RAUC {}",
        show(outcome.mean.accuracy),
        show(outcome.mean.balanced_accuracy),
        show(outcome.mean.rauc)
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// survival

#[derive(Deserialize)]
struct PredictedCac {
    id: String,
    predicted_cac: f64,
}

/// Replaces each predicted subject's model score and category and drops the
/// subjects without a prediction.
fn apply_predictions(records: Vec<SubjectRecord>, path: &Path) -> CliResult<Vec<SubjectRecord>> {
    let bytes = read_file(path)?;
    let mut rd = csv::Reader::from_reader(bytes.as_slice());
    let preds: IndexMap<String, f64> = rd
        .deserialize::<PredictedCac>()
        .map(|r| r.map(|p| (p.id, p.predicted_cac)))
        .collect::<Result<_, _>>()
        .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
        .or_fail(Failure::Config)?;
    let kept: Vec<SubjectRecord> = records
        .into_iter()
        .filter_map(|mut r| {
            let p = *preds.get(&r.id)?;
            r.covariates.insert("ai_cac".into(), p);
            r.covariates
                .insert("ai_cac_category".into(), f64::from(cac_category(p)));
            Some(r)
        })
        .collect();
    if kept.is_empty() {
        return fail(Failure::Degenerate, "no cohort subject has a prediction");
    }
    Ok(kept)
}

#[derive(Serialize)]
struct GroupSummary {
    value: f64,
    n: usize,
    events: usize,
    cumulative_event_estimate: f64,
    km_file: String,
}

#[derive(Serialize)]
struct LogRankReport {
    group_by: String,
    reference_group: f64,
    comparison: String,
    chi2: f64,
    p_value: f64,
    observed_reference: usize,
    expected_reference: f64,
}

fn group_label(v: f64) -> String {
    let s = v.to_string();
    s.replace('-', "m").replace('.', "p")
}

pub fn survival(cfg: &RunConfig, args: &SurvivalArgs, out: &Path) -> CliResult<()> {
    validated(cfg)?;
    let cohort_path = require_path(&args.cohort, &cfg.paths.cohort, "cohort")?;
    let mut records = survival_result(read_cohort_csv(read_file(&cohort_path)?.as_slice()))
        .map_err(|e| super::CliError {
            error: e.error.context(cohort_path.display().to_string()),
            ..e
        })?;
    if let Some(p) = args.predictions.as_ref().or(cfg.paths.predictions.as_ref()) {
        records = apply_predictions(records, p)?;
    }
    if records.is_empty() {
        return fail(Failure::Degenerate, "the cohort is empty");
    }
    let group_by = args
        .group_by
        .clone()
        .unwrap_or_else(|| cfg.survival.group_by.clone());
    let keys: Vec<f64> = records
        .iter()
        .map(|r| r.covariate(&group_by))
        .collect::<Result<_, _>>()
        .or_fail(Failure::Config)?;
    let mut values: Vec<f64> = keys.clone();
    values.sort_by(f64::total_cmp);
    values.dedup();
    if values.len() < 2 {
        return fail(
            Failure::Degenerate,
            format!("{group_by} takes a single value; nothing to compare"),
        );
    }

    let mut dir = OutDir::create(out)?;
    let horizon = cfg.survival.horizon_years;
    let mut groups = Vec::with_capacity(values.len());
    for &v in &values {
        let members: Vec<SubjectRecord> = records
            .iter()
            .zip(&keys)
            .filter(|(_, &k)| k == v)
            .map(|(r, _)| r.clone())
            .collect();
        let km = survival_result(kaplan_meier(&members))?;
        let mut buf = Vec::new();
        survival_result(km.write_csv(&mut buf))?;
        let km_file = format!("km_{group_by}_{}.csv", group_label(v));
        dir.write(&km_file, &buf)?;
        groups.push(GroupSummary {
            value: v,
            n: members.len(),
            events: members.iter().filter(|r| r.event).count(),
            cumulative_event_estimate: km_event_estimate(&km, horizon),
            km_file,
        });
    }
    let (mut reference, mut rest) = (Vec::new(), Vec::new());
    for (r, &k) in records.iter().zip(&keys) {
        if k == values[0] {
            &mut reference
        } else {
            &mut rest
        }
        .push(r.clone());
    }
    let lr = survival_result(log_rank(&reference, &rest))?;

    let univariate: CoxResult =
        survival_result(cox_fit(&records, &[group_by.as_str()], &cfg.survival.cox))?;
    let other = cfg.survival.bivariate_with.as_str();
    let bivariate: Option<CoxResult> = if other == group_by
        || !records[0].covariates.contains_key(other)
    {
        log::warn!(
            "skipping the bivariate model: covariate {other} is unavailable or the grouping itself"
        );
        None
    } else {
        Some(survival_result(cox_fit(
            &records,
            &[group_by.as_str(), other],
            &cfg.survival.cox,
        ))?)
    };

    #[derive(Serialize)]
    struct KmSummary<'a> {
        group_by: &'a str,
        horizon_years: f64,
        groups: &'a [GroupSummary],
    }
    dir.write_json(
        "km_summary.json",
        &KmSummary {
            group_by: &group_by,
            horizon_years: horizon,
            groups: &groups,
        },
    )?;
    dir.write_json(
        "logrank.json",
        &LogRankReport {
            group_by: group_by.clone(),
            reference_group: values[0],
            comparison: format!("{group_by} = {} vs all other groups", values[0]),
            chi2: lr.chi2,
            p_value: lr.p_value,
            observed_reference: lr.observed_a,
            expected_reference: lr.expected_a,
        },
    )?;
    dir.write_json("cox_univariate.json", &univariate)?;
    dir.write_json("cox_bivariate.json", &bivariate)?;
    dir.finish("survival", cfg)?;
    let hr = &univariate.coefficients[0];
    println!(
        "log-rank chi2 {:.3} (p {:.3e}); HR per {group_by} step {:.3} (95% CI {:.3}-{:.3})",
        lr.chi2, lr.p_value, hr.hazard_ratio, hr.ci_lower, hr.ci_upper
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// explain

pub fn explain(cfg: &RunConfig, args: &ExplainArgs, out: &Path) -> CliResult<()> {
    let model_dir = require_path(&args.model, &cfg.paths.model, "model")?;
    let (params, sidecar) = load_model(&model_dir)?;
    let mut stems = HashSet::new();
    let mut jobs = Vec::with_capacity(args.images.len());
    for path in &args.images {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        if !stems.insert(stem.clone()) {
            return fail(Failure::Config, format!("two inputs share the name {stem}"));
        }
        let img = read_dicom(path)?;
        let input = preprocess_pipeline(&img, &sidecar.preprocess, &sidecar.dataset_stats)
            .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
            .or_fail(Failure::Config)?;
        jobs.push((stem, input));
    }
    let mut dir = OutDir::create(out)?;
    for chunk in jobs.chunks(PREDICT_CHUNK) {
        let inputs: Vec<InputTensor> = chunk.iter().map(|j| j.1.clone()).collect();
        let maps = gradcam_batch(&params, &inputs).or_fail(Failure::Config)?;
        for ((stem, input), map) in chunk.iter().zip(&maps) {
            dir.write(&format!("{stem}.map.pgm"), &map_pgm(map))?;
            dir.write(
                &format!("{stem}.overlay.pgm"),
                &overlay_pgm(map, input).or_fail(Failure::Config)?,
            )?;
        }
    }
    dir.finish("explain", cfg)?;
    println!("wrote {} saliency maps to {}", jobs.len(), out.display());
    Ok(())
}
