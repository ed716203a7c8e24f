mod common;

use aicac_core::image::RealImage;
use aicac_core::metrics::{
    auc_confidence_interval, auc_from, calibration_table, confusion_at_threshold, cross_validate,
    diagnostic_metrics, kfold_split, pr_curve, rauc, roc_auc, roc_curve, train_test_split,
    write_fold_reports_csv, CvItem, DenseNetTrainer, FoldFit, FoldInput, FoldTrainer, MetricsError,
    ScoredSample, REPORT_COLUMNS,
};
use aicac_core::{DenseNetConfig, LabelTransform, TrainConfig};
use common::{auc_brute, rng};
use proptest::prelude::*;
use rand::Rng;

fn scored(scores: &[f64], cacs: &[f64]) -> Vec<ScoredSample> {
    scores
        .iter()
        .zip(cacs)
        .enumerate()
        .map(|(i, (&s, &c))| ScoredSample::new(format!("s{i}"), s, c))
        .collect()
}

/// Random instance with both classes present; scores drawn from a small
/// grid so ties are common.
fn random_instance(seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut r = rng(seed);
    loop {
        let n = r.gen_range(2..=50);
        let scores: Vec<f64> = (0..n)
            .map(|_| f64::from(r.gen_range(-5i32..=5)) * 0.25)
            .collect();
        let labels: Vec<bool> = (0..n).map(|_| r.gen_bool(0.4)).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            return (scores, labels);
        }
    }
}

#[test]
fn auc_matches_pair_counting() {
    for seed in 0..200 {
        let (scores, labels) = random_instance(seed);
        let got = auc_from(&scores, &labels).unwrap();
        assert!(
            (got - auc_brute(&scores, &labels)).abs() <= 1e-12,
            "seed {seed}"
        );
    }
}

#[test]
fn auc_complement_and_monotone_invariance_are_exact() {
    for seed in 0..200 {
        let (scores, labels) = random_instance(seed);
        let a = auc_from(&scores, &labels).unwrap();
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        assert_eq!(a + auc_from(&neg, &labels).unwrap(), 1.0, "seed {seed}");
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 7.0).collect();
        assert_eq!(auc_from(&warped, &labels).unwrap(), a, "seed {seed}");
    }
}

#[test]
fn auc_worked_examples() {
    let perfect = scored(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 5.0, 50.0]);
    assert_eq!(roc_auc(&perfect, 0.0).unwrap(), 1.0);
    let inverted = scored(&[0.9, 0.8, 0.2, 0.1], &[0.0, 0.0, 5.0, 50.0]);
    assert_eq!(roc_auc(&inverted, 0.0).unwrap(), 0.0);
    let tied = scored(&[0.5; 4], &[0.0, 0.0, 5.0, 50.0]);
    assert_eq!(roc_auc(&tied, 0.0).unwrap(), 0.5);
    let one_class = scored(&[0.1, 0.2], &[3.0, 4.0]);
    assert!(matches!(
        roc_auc(&one_class, 0.0),
        Err(MetricsError::OneClassOnly { .. })
    ));
}

#[test]
fn bootstrap_interval_brackets_estimate_and_is_reproducible() {
    let (scores, labels) = random_instance(11);
    let cacs: Vec<f64> = labels.iter().map(|&l| if l { 10.0 } else { 0.0 }).collect();
    let s = scored(&scores, &cacs);
    let a = roc_auc(&s, 0.0).unwrap();
    let (lo, hi) = auc_confidence_interval(&s, 0.0, 0.95, 500, 3).unwrap();
    assert!(lo <= a && a <= hi, "{lo} {a} {hi}");
    assert_eq!(
        (lo, hi),
        auc_confidence_interval(&s, 0.0, 0.95, 500, 3).unwrap()
    );
}

#[test]
fn uninformative_scores_give_intervals_covering_one_half() {
    // Pure-noise scores: the 95% interval should contain 0.5 for nearly
    // every seed.
    let mut covered = 0;
    for seed in 0..20 {
        let mut r = rng(1000 + seed);
        let s: Vec<ScoredSample> = (0..120)
            .map(|i| {
                ScoredSample::new(
                    format!("s{i}"),
                    r.gen::<f64>(),
                    if r.gen_bool(0.5) { 10.0 } else { 0.0 },
                )
            })
            .collect();
        let (lo, hi) = auc_confidence_interval(&s, 0.0, 0.95, 400, seed).unwrap();
        covered += usize::from(lo <= 0.5 && 0.5 <= hi);
    }
    assert!(covered >= 17, "covered {covered}/20");
}

#[test]
fn confusion_counts_match_a_naive_tally() {
    let mut r = rng(5);
    let cacs: Vec<f64> = (0..80)
        .map(|_| {
            if r.gen_bool(0.3) {
                0.0
            } else {
                r.gen_range(1.0..2000.0f64).round()
            }
        })
        .collect();
    let lt = LabelTransform::fit_default(&cacs).unwrap();
    let scores: Vec<f64> = (0..80).map(|_| r.gen_range(-2.5..2.5)).collect();
    let s = scored(&scores, &cacs);
    let th = lt.transform_threshold(0.0).unwrap();
    let c = confusion_at_threshold(&s, &th, 0.0);
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for i in 0..80 {
        let called = scores[i] > ((0.0 + lt.epsilon).ln() - lt.mu_log) / lt.sigma_log;
        match (called, cacs[i] > 0.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    assert_eq!((c.tp, c.fp, c.tn, c.fn_), (tp, fp, tn, fn_));
    let m = diagnostic_metrics(&c);
    assert_eq!(m.sensitivity, Some(tp as f64 / (tp + fn_) as f64));
    assert_eq!(m.specificity, Some(tn as f64 / (tn + fp) as f64));
    assert_eq!(m.accuracy, Some((tp + tn) as f64 / 80.0));
}

#[test]
fn inverted_predictions_swap_sensitivity_with_false_negative_rate() {
    let cacs = [0.0, 0.0, 0.0, 12.0, 40.0, 300.0, 0.0, 5.0];
    let lt = LabelTransform::fit_default(&cacs).unwrap();
    let th = lt.transform_threshold(0.0).unwrap();
    let scores: Vec<f64> = cacs
        .iter()
        .map(|&c| lt.transform(c).unwrap() + 0.01)
        .collect();
    let flipped: Vec<f64> = scores.iter().map(|s| 2.0 * th.transformed - s).collect();
    let a = diagnostic_metrics(&confusion_at_threshold(&scored(&scores, &cacs), &th, 0.0));
    let b = diagnostic_metrics(&confusion_at_threshold(&scored(&flipped, &cacs), &th, 0.0));
    assert_eq!(a.sensitivity, Some(1.0));
    assert_eq!(b.sensitivity, Some(0.0));
    assert_eq!(a.specificity.unwrap(), 1.0 - b.specificity.unwrap());
}

#[test]
fn empty_denominators_are_absent_not_zero() {
    let cacs = [5.0, 9.0];
    let lt = LabelTransform::fit_default(&[0.0, 5.0, 9.0]).unwrap();
    let th = lt.transform_threshold(0.0).unwrap();
    let m = diagnostic_metrics(&confusion_at_threshold(
        &scored(&[3.0, 3.0], &cacs),
        &th,
        0.0,
    ));
    assert_eq!(m.specificity, None);
    assert_eq!(m.npv, None);
    assert_eq!(m.balanced_accuracy, None);
    assert_eq!(m.sensitivity, Some(1.0));
}

#[test]
fn pr_curve_matches_a_threshold_sweep() {
    let (scores, labels) = random_instance(21);
    let cacs: Vec<f64> = labels.iter().map(|&l| if l { 50.0 } else { 0.0 }).collect();
    let pts = pr_curve(&scored(&scores, &cacs), 0.0).unwrap();
    let mut distinct = scores.clone();
    distinct.sort_by(|a, b| b.total_cmp(a));
    distinct.dedup();
    assert_eq!(pts.len(), distinct.len());
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    for (p, &t) in pts.iter().zip(&distinct) {
        let called: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = called.iter().filter(|&&i| labels[i]).count() as f64;
        assert_eq!(p.threshold, t);
        assert_eq!(p.recall, tp / pos);
        assert_eq!(p.precision, tp / called.len() as f64);
    }
}

#[test]
fn roc_curve_runs_from_origin_to_corner() {
    let (scores, labels) = random_instance(8);
    let cacs: Vec<f64> = labels.iter().map(|&l| if l { 50.0 } else { 0.0 }).collect();
    let pts = roc_curve(&scored(&scores, &cacs), 0.0).unwrap();
    assert_eq!(pts.first(), Some(&(0.0, 0.0)));
    assert_eq!(pts.last(), Some(&(1.0, 1.0)));
    assert!(pts.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
}

#[test]
fn rauc_is_the_mean_over_usable_thresholds() {
    let cacs = [0.0, 0.0, 30.0, 80.0, 150.0, 250.0, 900.0, 10.0];
    let scores = [0.1, -0.3, 0.4, 0.2, 0.9, 0.5, 1.2, 0.0];
    let s = scored(&scores, &cacs);
    let mut parts = Vec::new();
    for t in [0.0, 100.0, 400.0] {
        let labels: Vec<bool> = cacs.iter().map(|&c| c > t).collect();
        parts.push(auc_brute(&scores, &labels));
    }
    let want = parts.iter().sum::<f64>() / 3.0;
    assert!((rauc(&s, &[0.0, 100.0, 400.0]).unwrap() - want).abs() < 1e-12);
    // Thresholds above every score drop out instead of failing.
    assert!((rauc(&s, &[0.0, 5000.0]).unwrap() - parts[0]).abs() < 1e-12);
    assert!(matches!(
        rauc(&s, &[5000.0]),
        Err(MetricsError::AllGridDegenerate)
    ));
}

#[test]
fn calibration_strata_match_a_naive_grouping() {
    let cacs = [0.0, 0.0, 50.0, 100.0, 101.0, 399.0, 400.0, 1200.0];
    let lt = LabelTransform::fit_default(&cacs).unwrap();
    let scores = [-1.0, -0.5, 0.1, 0.3, 0.35, 0.8, 0.9, 1.4];
    let rows = calibration_table(&scored(&scores, &cacs), &lt, &[0.0, 100.0, 400.0]).unwrap();
    let groups: [(&str, &[usize]); 4] = [
        ("<=0", &[0, 1]),
        ("(0,100]", &[2, 3]),
        ("(100,400]", &[4, 5, 6]),
        (">400", &[7]),
    ];
    assert_eq!(rows.len(), 4);
    for (row, (label, idx)) in rows.iter().zip(groups) {
        assert_eq!(row.stratum, label);
        assert_eq!(row.count, idx.len());
        let mp: f64 = idx
            .iter()
            .map(|&i| lt.inverse_transform(scores[i]))
            .sum::<f64>()
            / idx.len() as f64;
        let mt: f64 = idx.iter().map(|&i| cacs[i]).sum::<f64>() / idx.len() as f64;
        assert!((row.mean_predicted_cac - mp).abs() < 1e-9 * mp.max(1.0));
        assert!((row.mean_true_cac - mt).abs() < 1e-12 * mt.max(1.0));
    }
}

#[test]
fn kfold_partitions_cover_every_index_once() {
    for (n, k) in [(10, 5), (11, 5), (400, 5), (7, 7), (23, 4)] {
        let folds = kfold_split(n, k, 9).unwrap();
        assert_eq!(folds.len(), k);
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert_eq!(folds, kfold_split(n, k, 9).unwrap());
    }
    assert!(matches!(
        kfold_split(3, 5, 0),
        Err(MetricsError::TooFewSamples { n: 3, k: 5 })
    ));
}

#[test]
fn train_test_split_is_disjoint_and_seeded() {
    let (tr, te) = train_test_split(400, 0.8, 4).unwrap();
    assert_eq!((tr.len(), te.len()), (320, 80));
    let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..400).collect::<Vec<_>>());
    assert_eq!(
        (tr.clone(), te.clone()),
        train_test_split(400, 0.8, 4).unwrap()
    );
    assert_ne!(te, train_test_split(400, 0.8, 5).unwrap().1);
}

/// Predicts the held-out items' transformed truth, which it reads from a
/// side table keyed by image content; used to check the report plumbing.
struct Oracle(Vec<(Vec<f64>, f64)>);

impl FoldTrainer for Oracle {
    fn fit_predict(&self, input: &FoldInput) -> Result<FoldFit, MetricsError> {
        let predictions = input
            .held_out_ids
            .iter()
            .map(|id| {
                let i: usize = id[1..].parse().unwrap();
                input.label_transform.transform(self.0[i].1).unwrap()
            })
            .collect();
        Ok(FoldFit {
            predictions,
            params: None,
        })
    }
}

fn tiny_items(n: usize, dim: usize, seed: u64) -> Vec<CvItem> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let cac = if i % 3 == 0 {
                0.0
            } else {
                r.gen_range(1.0..1500.0f64).round()
            };
            let values = (0..dim * dim).map(|_| r.gen_range(0.0..1.0)).collect();
            CvItem {
                id: format!("i{i}"),
                image: RealImage::new(dim, dim, values).unwrap(),
                truth_cac: cac,
            }
        })
        .collect()
}

#[test]
fn perfect_predictor_scores_one_on_every_fold() {
    let items = tiny_items(40, 4, 1);
    let table = items
        .iter()
        .map(|it| (it.image.values().to_vec(), it.truth_cac))
        .collect();
    let out = cross_validate(&items, 5, 3, &[0.0, 100.0, 400.0], &Oracle(table)).unwrap();
    assert_eq!(out.folds.len(), 5);
    for f in &out.folds {
        // A fold without one of the classes has no balanced accuracy; every
        // rate that is defined is perfect.
        assert_eq!(f.accuracy, Some(1.0));
        for v in [f.balanced_accuracy, f.sensitivity, f.specificity, f.rauc]
            .into_iter()
            .flatten()
        {
            assert_eq!(v, 1.0);
        }
    }
    assert_eq!(out.mean.accuracy, Some(1.0));
    let mut csv = Vec::new();
    write_fold_reports_csv(&out, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), REPORT_COLUMNS.join(","));
    assert_eq!(lines.clone().count(), 6);
    assert!(lines.last().unwrap().starts_with("Mean,"));
}

#[test]
fn report_columns_are_the_fold_table_columns() {
    assert_eq!(
        REPORT_COLUMNS,
        [
            "fold",
            "accuracy",
            "balanced_accuracy",
            "sensitivity",
            "specificity",
            "rauc"
        ]
    );
}

fn leakage_trainer() -> DenseNetTrainer {
    let densenet = DenseNetConfig {
        input_dim: 16,
        init_channels: 4,
        growth_rate: 2,
        block_layers: vec![1, 1],
        compression: 0.5,
        head_hidden: 4,
        use_batchnorm: true,
    };
    let train = TrainConfig {
        epochs: 1,
        batch_size: 4,
        seed: 2,
        ..TrainConfig::default()
    };
    DenseNetTrainer {
        densenet,
        train,
        init_seed: 6,
    }
}

#[test]
fn held_out_labels_never_reach_training() {
    let items = tiny_items(20, 16, 4);
    let trainer = leakage_trainer();
    let base = cross_validate(&items, 4, 8, &[0.0], &trainer).unwrap();
    for fold in 0..4 {
        let mut perturbed = items.clone();
        for &i in &base.fold_indices[fold] {
            perturbed[i].truth_cac = 1999.0 - perturbed[i].truth_cac;
        }
        let again = cross_validate(&perturbed, 4, 8, &[0.0], &trainer).unwrap();
        let (a, b) = (
            base.models[fold].as_ref().unwrap(),
            again.models[fold].as_ref().unwrap(),
        );
        assert!(
            a.tensors()
                .iter()
                .zip(b.tensors())
                .all(|((_, x), (_, y))| x.data == y.data),
            "fold {fold}"
        );
    }
}

proptest! {
    #[test]
    fn auc_lies_in_unit_interval(v in prop::collection::vec((-10.0f64..10.0, any::<bool>()), 2..40)) {
        let (scores, labels): (Vec<f64>, Vec<bool>) = v.into_iter().unzip();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let a = auc_from(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - auc_brute(&scores, &labels)).abs() <= 1e-12);
    }
}
