use std::ffi::{CStr, CString};
use std::ptr;

use aicac_core::explain::gradcam;
use aicac_core::model::{init_model, predict, save_weights, ModelSidecar};
use aicac_core::preprocess::preprocess_pipeline;
use aicac_core::synth::{generate_samples, to_dicom, SynthConfig};
use aicac_core::{
    parse_dicom, write_test_dicom, DatasetStats, DenseNetConfig, LabelTransform, PreprocessConfig,
};
use aicac_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(aicac_last_error()) }
        .to_string_lossy()
        .into_owned()
}

struct Fixture {
    _dir: tempfile::TempDir,
    path: CString,
    sidecar: ModelSidecar,
    dicoms: Vec<Vec<u8>>,
}

fn fixture() -> Fixture {
    let samples = generate_samples(&SynthConfig {
        n: 3,
        seed: 11,
        ..SynthConfig::default()
    })
    .unwrap();
    let dicoms: Vec<Vec<u8>> = samples
        .iter()
        .map(|s| write_test_dicom(&to_dicom(&s.image)))
        .collect();
    let cac: Vec<f64> = [0.0, 10.0, 150.0, 900.0].to_vec();
    let densenet = DenseNetConfig::desk();
    let sidecar = ModelSidecar {
        densenet: densenet.clone(),
        label_transform: LabelTransform::fit_default(&cac).unwrap(),
        dataset_stats: DatasetStats {
            mu: 0.4,
            sigma: 0.2,
        },
        preprocess: PreprocessConfig::desk(),
        seed: 5,
    };
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("weights.bin"),
        save_weights(&init_model(&densenet, 5).unwrap()),
    )
    .unwrap();
    std::fs::write(
        dir.path().join("model.json"),
        serde_json::to_vec(&sidecar).unwrap(),
    )
    .unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    Fixture {
        _dir: dir,
        path,
        sidecar,
        dicoms,
    }
}

fn load(path: &CString) -> *mut AicacModel {
    let mut model = ptr::null_mut();
    assert_eq!(
        unsafe { aicac_model_load(path.as_ptr(), &mut model) },
        AicacStatus::Ok,
        "{}",
        last_error()
    );
    assert!(!model.is_null());
    model
}

#[test]
fn predictions_and_maps_match_the_library() {
    let fx = fixture();
    let model = load(&fx.path);
    let mut dim = 0usize;
    assert_eq!(
        unsafe { aicac_model_input_dim(model, &mut dim) },
        AicacStatus::Ok
    );
    assert_eq!(dim, 64);

    let params = aicac_core::model::load_weights(
        &std::fs::read(fx._dir.path().join("weights.bin")).unwrap(),
        &fx.sidecar.densenet,
    )
    .unwrap();
    for bytes in &fx.dicoms {
        let input = preprocess_pipeline(
            &parse_dicom(bytes).unwrap(),
            &fx.sidecar.preprocess,
            &fx.sidecar.dataset_stats,
        )
        .unwrap();
        let expected = predict(&params, std::slice::from_ref(&input), 1).unwrap()[0];

        let (mut cac, mut score) = (f64::NAN, f64::NAN);
        let st = unsafe {
            aicac_predict_dicom(model, bytes.as_ptr(), bytes.len(), &mut cac, &mut score)
        };
        assert_eq!(st, AicacStatus::Ok, "{}", last_error());
        assert_eq!(score, expected);
        assert_eq!(cac, fx.sidecar.label_transform.inverse_transform(expected));
        assert!((0.0..=2000.0).contains(&cac));
        // The score output is optional.
        let st = unsafe {
            aicac_predict_dicom(
                model,
                bytes.as_ptr(),
                bytes.len(),
                &mut cac,
                ptr::null_mut(),
            )
        };
        assert_eq!(st, AicacStatus::Ok);

        let mut map = vec![f64::NAN; dim * dim];
        let st = unsafe {
            aicac_gradcam_dicom(
                model,
                bytes.as_ptr(),
                bytes.len(),
                map.as_mut_ptr(),
                map.len(),
            )
        };
        assert_eq!(st, AicacStatus::Ok, "{}", last_error());
        assert_eq!(map, gradcam(&params, &input).unwrap().values());
        assert!(map.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    unsafe { aicac_model_free(model) };
}

#[test]
fn model_errors_are_reported() {
    let fx = fixture();
    let mut model = ptr::null_mut();
    assert_eq!(
        unsafe { aicac_model_load(ptr::null(), &mut model) },
        AicacStatus::NullPointer
    );
    assert!(last_error().contains("model_dir"));
    assert_eq!(
        unsafe { aicac_model_load(fx.path.as_ptr(), ptr::null_mut()) },
        AicacStatus::NullPointer
    );

    let missing = CString::new(fx._dir.path().join("nope").to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { aicac_model_load(missing.as_ptr(), &mut model) },
        AicacStatus::Io
    );
    assert!(model.is_null());
    assert!(last_error().contains("model.json"));

    std::fs::write(fx._dir.path().join("weights.bin"), b"garbage").unwrap();
    assert_eq!(
        unsafe { aicac_model_load(fx.path.as_ptr(), &mut model) },
        AicacStatus::Parse
    );
    assert!(last_error().contains("weights.bin"));
}

#[test]
fn input_errors_are_reported() {
    let fx = fixture();
    let model = load(&fx.path);
    let mut cac = 0.0;
    let junk = b"not a dicom file at all";
    assert_eq!(
        unsafe { aicac_predict_dicom(model, junk.as_ptr(), junk.len(), &mut cac, ptr::null_mut()) },
        AicacStatus::Parse
    );
    assert!(!last_error().is_empty());
    assert_eq!(
        unsafe { aicac_predict_dicom(model, ptr::null(), 10, &mut cac, ptr::null_mut()) },
        AicacStatus::NullPointer
    );
    assert_eq!(
        unsafe {
            aicac_predict_dicom(
                ptr::null(),
                junk.as_ptr(),
                junk.len(),
                &mut cac,
                ptr::null_mut(),
            )
        },
        AicacStatus::NullPointer
    );

    let bytes = &fx.dicoms[0];
    let mut map = vec![0.0; 10];
    let st = unsafe {
        aicac_gradcam_dicom(
            model,
            bytes.as_ptr(),
            bytes.len(),
            map.as_mut_ptr(),
            map.len(),
        )
    };
    assert_eq!(st, AicacStatus::InvalidArgument);
    assert!(last_error().contains("4096"));

    // A success clears the message.
    let st = unsafe {
        aicac_predict_dicom(
            model,
            bytes.as_ptr(),
            bytes.len(),
            &mut cac,
            ptr::null_mut(),
        )
    };
    assert_eq!(st, AicacStatus::Ok);
    assert_eq!(last_error(), "");
    unsafe {
        aicac_model_free(model);
        aicac_model_free(ptr::null_mut());
    }
}

#[test]
fn label_transform_round_trips() {
    let train = [0.0, 3.0, 40.0, 400.0, 1500.0, 2600.0];
    let mut lt = ptr::null_mut();
    assert_eq!(
        unsafe { aicac_label_transform_fit(train.as_ptr(), train.len(), &mut lt) },
        AicacStatus::Ok
    );

    // Oracle: clip to 2000, log with offset 1e-5, standardize with the
    // population moments of the training values.
    let logs: Vec<f64> = train.iter().map(|&c| (c.min(2000.0) + 1e-5).ln()).collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    let sd = (logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / logs.len() as f64).sqrt();
    for &c in &[0.0, 7.5, 100.0, 1999.0] {
        let mut y = f64::NAN;
        assert_eq!(
            unsafe { aicac_label_transform_apply(lt, c, &mut y) },
            AicacStatus::Ok
        );
        let expected = ((c + 1e-5).ln() - mean) / sd;
        assert!(
            (y - expected).abs() < 1e-9 * expected.abs().max(1.0),
            "{c}: {y} vs {expected}"
        );
        let mut back = f64::NAN;
        assert_eq!(
            unsafe { aicac_label_transform_inverse(lt, y, &mut back) },
            AicacStatus::Ok
        );
        assert!((back - c).abs() < 1e-6 * c.max(1.0), "{c} -> {back}");
    }
    let mut y = 0.0;
    assert_eq!(
        unsafe { aicac_label_transform_apply(lt, -1.0, &mut y) },
        AicacStatus::InvalidArgument
    );
    assert_eq!(
        unsafe { aicac_label_transform_inverse(lt, f64::NAN, &mut y) },
        AicacStatus::InvalidArgument
    );
    unsafe { aicac_label_transform_free(lt) };

    let mut lt = ptr::null_mut();
    assert_eq!(
        unsafe { aicac_label_transform_fit(ptr::null(), 0, &mut lt) },
        AicacStatus::InvalidArgument
    );
    assert!(lt.is_null());
}

#[test]
fn auc_matches_pair_counting() {
    let scores = [0.1, 0.4, 0.35, 0.8, 0.4, 0.05, 0.9, 0.4];
    let labels = [0u8, 0, 1, 1, 1, 0, 1, 0];
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    let mut auc = f64::NAN;
    assert_eq!(
        unsafe { aicac_roc_auc(scores.as_ptr(), labels.as_ptr(), scores.len(), &mut auc) },
        AicacStatus::Ok
    );
    assert!((auc - wins / pairs).abs() < 1e-12);

    let one_class = [1u8; 8];
    assert_eq!(
        unsafe { aicac_roc_auc(scores.as_ptr(), one_class.as_ptr(), scores.len(), &mut auc) },
        AicacStatus::Degenerate
    );
    let bad = [f64::NAN, 1.0];
    assert_eq!(
        unsafe { aicac_roc_auc(bad.as_ptr(), labels.as_ptr(), 2, &mut auc) },
        AicacStatus::InvalidArgument
    );
    assert_eq!(
        unsafe { aicac_roc_auc(scores.as_ptr(), labels.as_ptr(), 8, ptr::null_mut()) },
        AicacStatus::NullPointer
    );
}

const TIMES: [f64; 10] = [1.0, 2.0, 2.0, 3.0, 4.0, 5.0, 5.0, 6.0, 7.0, 8.0];
const EVENTS: [u8; 10] = [1, 1, 0, 1, 0, 1, 1, 0, 1, 0];

#[test]
fn kaplan_meier_matches_product_limit() {
    let mut surv = [f64::NAN; 10];
    assert_eq!(
        unsafe {
            aicac_kaplan_meier(
                TIMES.as_ptr(),
                EVENTS.as_ptr(),
                TIMES.len(),
                surv.as_mut_ptr(),
            )
        },
        AicacStatus::Ok
    );
    for (i, &t) in TIMES.iter().enumerate() {
        let mut s = 1.0;
        let mut distinct: Vec<f64> = TIMES.to_vec();
        distinct.dedup();
        for &u in distinct.iter().filter(|&&u| u <= t) {
            let at_risk = TIMES.iter().filter(|&&x| x >= u).count() as f64;
            let deaths = TIMES
                .iter()
                .zip(&EVENTS)
                .filter(|(&x, &e)| x == u && e == 1)
                .count() as f64;
            s *= 1.0 - deaths / at_risk;
        }
        assert!((surv[i] - s).abs() < 1e-12, "t={t}: {} vs {s}", surv[i]);
    }
}

#[test]
fn log_rank_matches_hand_computation() {
    let group = [1u8, 0, 1, 0, 1, 1, 0, 0, 1, 0];
    let (mut chi2, mut p) = (f64::NAN, f64::NAN);
    let st = unsafe {
        aicac_log_rank(
            TIMES.as_ptr(),
            EVENTS.as_ptr(),
            group.as_ptr(),
            TIMES.len(),
            &mut chi2,
            &mut p,
        )
    };
    assert_eq!(st, AicacStatus::Ok, "{}", last_error());

    let (mut o_minus_e, mut var) = (0.0, 0.0);
    let mut distinct: Vec<f64> = TIMES.to_vec();
    distinct.dedup();
    for &u in &distinct {
        let risk: Vec<usize> = (0..10).filter(|&i| TIMES[i] >= u).collect();
        let n = risk.len() as f64;
        let n1 = risk.iter().filter(|&&i| group[i] == 1).count() as f64;
        let d = (0..10).filter(|&i| TIMES[i] == u && EVENTS[i] == 1).count() as f64;
        let d1 = (0..10)
            .filter(|&i| TIMES[i] == u && EVENTS[i] == 1 && group[i] == 1)
            .count() as f64;
        if d == 0.0 {
            continue;
        }
        o_minus_e += d1 - d * n1 / n;
        if n > 1.0 {
            var += d * (n1 / n) * (1.0 - n1 / n) * (n - d) / (n - 1.0);
        }
    }
    let expected = o_minus_e * o_minus_e / var;
    assert!((chi2 - expected).abs() < 1e-10, "{chi2} vs {expected}");
    assert!(p > 0.0 && p <= 1.0);
}

#[test]
fn cox_coefficient_solves_the_score_equation() {
    let x = [0.5, -1.0, 1.2, 0.0, 2.0, -0.3, 0.7, -1.5, 0.9, 0.1];
    let (mut beta, mut se, mut p) = (f64::NAN, f64::NAN, f64::NAN);
    let st = unsafe {
        aicac_cox_univariate(
            TIMES.as_ptr(),
            EVENTS.as_ptr(),
            x.as_ptr(),
            TIMES.len(),
            &mut beta,
            &mut se,
            &mut p,
        )
    };
    assert_eq!(st, AicacStatus::Ok, "{}", last_error());

    // Breslow score and information at the returned coefficient.
    let (mut score, mut info) = (0.0, 0.0);
    for i in (0..10).filter(|&i| EVENTS[i] == 1) {
        let risk: Vec<usize> = (0..10).filter(|&j| TIMES[j] >= TIMES[i]).collect();
        let w: Vec<f64> = risk.iter().map(|&j| (beta * x[j]).exp()).collect();
        let s0: f64 = w.iter().sum();
        let s1: f64 = risk.iter().zip(&w).map(|(&j, w)| w * x[j]).sum();
        let s2: f64 = risk.iter().zip(&w).map(|(&j, w)| w * x[j] * x[j]).sum();
        score += x[i] - s1 / s0;
        info += s2 / s0 - (s1 / s0).powi(2);
    }
    assert!(score.abs() < 1e-8, "score {score}");
    assert!(
        (se - info.sqrt().recip()).abs() < 1e-8,
        "se {se} vs {}",
        info.sqrt().recip()
    );
    assert!(p > 0.0 && p <= 1.0);

    let no_events = [0u8; 10];
    let st = unsafe {
        aicac_cox_univariate(
            TIMES.as_ptr(),
            no_events.as_ptr(),
            x.as_ptr(),
            10,
            &mut beta,
            &mut se,
            &mut p,
        )
    };
    assert_eq!(st, AicacStatus::Degenerate);
    assert!(!last_error().is_empty());
}

#[test]
fn version_and_header() {
    let v = unsafe { CStr::from_ptr(aicac_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));

    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/aicac.h")).unwrap();
    for name in [
        "AICAC_STATUS_OK",
        "AICAC_STATUS_PANIC",
        "typedef struct AicacModel AicacModel",
        "aicac_last_error(void)",
        "aicac_model_load(",
        "aicac_model_free(",
        "aicac_predict_dicom(",
        "aicac_gradcam_dicom(",
        "aicac_label_transform_fit(",
        "aicac_roc_auc(",
        "aicac_kaplan_meier(",
        "aicac_log_rank(",
        "aicac_cox_univariate(",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
