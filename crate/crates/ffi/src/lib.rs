//! C interface to the calcium-scoring library.
//!
//! Every function returns an [`AicacStatus`]; on failure a description is
//! available from [`aicac_last_error`] on the same thread until the next
//! call. Handles are opaque and must be released with their `_free`
//! function. Panics never cross the boundary; they surface as
//! `AICAC_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use aicac_core::explain::gradcam;
use aicac_core::metrics::auc_from;
use aicac_core::model::{load_weights, predict, ModelParams, ModelSidecar};
use aicac_core::preprocess::preprocess_pipeline;
use aicac_core::survival::{
    cox_fit, kaplan_meier, log_rank, CoxOptions, SubjectRecord, SurvivalError,
};
use aicac_core::{parse_dicom, InputTensor, LabelTransform};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AicacStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// An argument was out of range or inconsistent.
    InvalidArgument = 2,
    /// A file could not be read.
    Io = 3,
    /// Input bytes could not be parsed (DICOM, weights, JSON).
    Parse = 4,
    /// The data admit no answer (one class only, no events, separation).
    Degenerate = 5,
    /// An internal error; please report it.
    Panic = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl std::fmt::Display) {
    let text = CString::new(msg.to_string().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

struct Failure(AicacStatus, String);

type Outcome = Result<(), Failure>;

fn err<T>(status: AicacStatus, msg: impl std::fmt::Display) -> Result<T, Failure> {
    Err(Failure(status, msg.to_string()))
}

/// Runs `body`, recording any failure message and converting panics.
fn guard(body: impl FnOnce() -> Outcome) -> AicacStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error("");
            AicacStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal error (panic)");
            AicacStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        err(AicacStatus::NullPointer, format!("{name} is null"))
    } else {
        Ok(())
    }
}

/// Borrows `n` elements; a zero length accepts a null pointer.
unsafe fn slice<'a, T>(p: *const T, n: usize, name: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, name: &str) -> Result<&'a mut [T], Failure> {
    if n == 0 {
        return Ok(&mut []);
    }
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts_mut(p, n))
}

fn survival_failure(e: SurvivalError) -> Failure {
    let status = match e {
        SurvivalError::InvalidRecord { .. }
        | SurvivalError::UnknownCovariate(_)
        | SurvivalError::Format(_) => AicacStatus::InvalidArgument,
        _ => AicacStatus::Degenerate,
    };
    Failure(status, e.to_string())
}

/// The message of the last failed call on this thread; empty after a
/// success. The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn aicac_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn aicac_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---------------------------------------------------------------------------
// Model handle

/// A trained model with its preprocessing settings, dataset statistics and
/// label transform.
pub struct AicacModel {
    params: ModelParams,
    sidecar: ModelSidecar,
}

impl AicacModel {
    fn input(&self, bytes: &[u8]) -> Result<InputTensor, Failure> {
        let img = parse_dicom(bytes).map_err(|e| Failure(AicacStatus::Parse, e.to_string()))?;
        preprocess_pipeline(&img, &self.sidecar.preprocess, &self.sidecar.dataset_stats)
            .map_err(|e| Failure(AicacStatus::InvalidArgument, e.to_string()))
    }
}

/// Loads a model directory written by `aicac train` (`weights.bin` and
/// `model.json`). On success `*out` owns a handle for
/// [`aicac_model_free`].
///
/// # Safety
/// `model_dir` must be a NUL-terminated UTF-8 path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aicac_model_load(
    model_dir: *const c_char,
    out: *mut *mut AicacModel,
) -> AicacStatus {
    guard(|| {
        non_null(model_dir, "model_dir")?;
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let dir = CStr::from_ptr(model_dir).to_str().map_err(|_| {
            Failure(
                AicacStatus::InvalidArgument,
                "model_dir is not UTF-8".into(),
            )
        })?;
        let dir = Path::new(dir);
        let read = |name: &str| {
            std::fs::read(dir.join(name)).map_err(|e| {
                Failure(
                    AicacStatus::Io,
                    format!("{}: {e}", dir.join(name).display()),
                )
            })
        };
        let sidecar: ModelSidecar = serde_json::from_slice(&read("model.json")?)
            .map_err(|e| Failure(AicacStatus::Parse, format!("model.json: {e}")))?;
        let params = load_weights(&read("weights.bin")?, &sidecar.densenet)
            .map_err(|e| Failure(AicacStatus::Parse, format!("weights.bin: {e}")))?;
        *out = Box::into_raw(Box::new(AicacModel { params, sidecar }));
        Ok(())
    })
}

/// Releases a model handle; null is ignored.
///
/// # Safety
/// `model` must come from [`aicac_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn aicac_model_free(model: *mut AicacModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length of the square model input (and of saliency maps).
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aicac_model_input_dim(
    model: *const AicacModel,
    out: *mut usize,
) -> AicacStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = (*model).params.config().input_dim;
        Ok(())
    })
}

/// Scores one DICOM file held in memory. Writes the predicted CAC score
/// (original units, within the clipping range) and, if `out_score` is not
/// null, the raw prediction in the normalized log domain.
///
/// # Safety
/// `model` must be a live handle, `bytes` must point to `len` readable
/// bytes, `out_cac` must be writable and `out_score` null or writable.
#[no_mangle]
pub unsafe extern "C" fn aicac_predict_dicom(
    model: *const AicacModel,
    bytes: *const u8,
    len: usize,
    out_cac: *mut f64,
    out_score: *mut f64,
) -> AicacStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out_cac, "out_cac")?;
        let m = &*model;
        let input = m.input(slice(bytes, len, "bytes")?)?;
        let score = predict(&m.params, std::slice::from_ref(&input), 1)
            .map_err(|e| Failure(AicacStatus::InvalidArgument, e.to_string()))?[0];
        *out_cac = m.sidecar.label_transform.inverse_transform(score);
        if !out_score.is_null() {
            *out_score = score;
        }
        Ok(())
    })
}

/// Grad-CAM saliency of one DICOM file: `dim * dim` values in `[0, 1]`,
/// row-major, where `dim` is [`aicac_model_input_dim`]. `map_len` must equal
/// `dim * dim`.
///
/// # Safety
/// `model` must be a live handle, `bytes` must point to `len` readable
/// bytes and `out_map` to `map_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn aicac_gradcam_dicom(
    model: *const AicacModel,
    bytes: *const u8,
    len: usize,
    out_map: *mut f64,
    map_len: usize,
) -> AicacStatus {
    guard(|| {
        non_null(model, "model")?;
        let m = &*model;
        let dim = m.params.config().input_dim;
        if map_len != dim * dim {
            return err(
                AicacStatus::InvalidArgument,
                format!("map_len must be {}, got {map_len}", dim * dim),
            );
        }
        let out = slice_mut(out_map, map_len, "out_map")?;
        let input = m.input(slice(bytes, len, "bytes")?)?;
        let map = gradcam(&m.params, &input)
            .map_err(|e| Failure(AicacStatus::InvalidArgument, e.to_string()))?;
        out.copy_from_slice(map.values());
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Label transform handle

/// Clip/log/normalize transform of CAC scores.
pub struct AicacLabelTransform(LabelTransform);

/// Fits the transform on training scores with the default clipping (2000)
/// and offset (1e-5).
///
/// # Safety
/// `scores` must point to `n` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aicac_label_transform_fit(
    scores: *const f64,
    n: usize,
    out: *mut *mut AicacLabelTransform,
) -> AicacStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let lt = LabelTransform::fit_default(slice(scores, n, "scores")?)
            .map_err(|e| Failure(AicacStatus::InvalidArgument, e.to_string()))?;
        *out = Box::into_raw(Box::new(AicacLabelTransform(lt)));
        Ok(())
    })
}

/// Releases a label transform; null is ignored.
///
/// # Safety
/// `lt` must come from [`aicac_label_transform_fit`] and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn aicac_label_transform_free(lt: *mut AicacLabelTransform) {
    if !lt.is_null() {
        drop(Box::from_raw(lt));
    }
}

/// Maps a CAC score into the normalized log domain.
///
/// # Safety
/// `lt` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aicac_label_transform_apply(
    lt: *const AicacLabelTransform,
    cac: f64,
    out: *mut f64,
) -> AicacStatus {
    guard(|| {
        non_null(lt, "lt")?;
        non_null(out, "out")?;
        *out = (*lt)
            .0
            .transform(cac)
            .map_err(|e| Failure(AicacStatus::InvalidArgument, e.to_string()))?;
        Ok(())
    })
}

/// Maps a normalized-log value back to a CAC score in `[0, 2000]`.
///
/// # Safety
/// `lt` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aicac_label_transform_inverse(
    lt: *const AicacLabelTransform,
    value: f64,
    out: *mut f64,
) -> AicacStatus {
    guard(|| {
        non_null(lt, "lt")?;
        non_null(out, "out")?;
        if value.is_nan() {
            return err(AicacStatus::InvalidArgument, "value is NaN");
        }
        *out = (*lt).0.inverse_transform(value);
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Statistics

/// ROC AUC of `scores` against 0/1 `labels` (nonzero means positive), ties
/// counted as one half.
///
/// # Safety
/// `scores` and `labels` must point to `n` readable elements; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn aicac_roc_auc(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> AicacStatus {
    guard(|| {
        non_null(out, "out")?;
        let s = slice(scores, n, "scores")?;
        let l: Vec<bool> = slice(labels, n, "labels")?
            .iter()
            .map(|&b| b != 0)
            .collect();
        if s.iter().any(|v| !v.is_finite()) {
            return err(AicacStatus::InvalidArgument, "scores must be finite");
        }
        *out = auc_from(s, &l).map_err(|e| Failure(AicacStatus::Degenerate, e.to_string()))?;
        Ok(())
    })
}

unsafe fn records(
    times: *const f64,
    events: *const u8,
    x: Option<*const f64>,
    n: usize,
) -> Result<Vec<SubjectRecord>, Failure> {
    let t = slice(times, n, "times")?;
    let e = slice(events, n, "events")?;
    let x = match x {
        Some(p) => Some(slice(p, n, "x")?),
        None => None,
    };
    Ok((0..n)
        .map(|i| SubjectRecord {
            id: i.to_string(),
            time: t[i],
            event: e[i] != 0,
            covariates: x
                .map(|x| [("x".to_string(), x[i])].into_iter().collect())
                .unwrap_or_default(),
        })
        .collect())
}

/// Kaplan-Meier survival evaluated at each subject's own time:
/// `out_survival[i] = S(times[i])`.
///
/// # Safety
/// `times`, `events` and `out_survival` must point to `n` elements.
#[no_mangle]
pub unsafe extern "C" fn aicac_kaplan_meier(
    times: *const f64,
    events: *const u8,
    n: usize,
    out_survival: *mut f64,
) -> AicacStatus {
    guard(|| {
        let recs = records(times, events, None, n)?;
        let out = slice_mut(out_survival, n, "out_survival")?;
        let km = kaplan_meier(&recs).map_err(survival_failure)?;
        for (o, r) in out.iter_mut().zip(&recs) {
            *o = km.survival_at(r.time);
        }
        Ok(())
    })
}

/// Two-group log-rank test; `group[i]` nonzero puts subject `i` in the
/// first group.
///
/// # Safety
/// `times`, `events` and `group` must point to `n` elements; `out_chi2` and
/// `out_p` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aicac_log_rank(
    times: *const f64,
    events: *const u8,
    group: *const u8,
    n: usize,
    out_chi2: *mut f64,
    out_p: *mut f64,
) -> AicacStatus {
    guard(|| {
        non_null(out_chi2, "out_chi2")?;
        non_null(out_p, "out_p")?;
        let recs = records(times, events, None, n)?;
        let g = slice(group, n, "group")?;
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (r, &gi) in recs.into_iter().zip(g) {
            if gi != 0 { &mut a } else { &mut b }.push(r);
        }
        let lr = log_rank(&a, &b).map_err(survival_failure)?;
        *out_chi2 = lr.chi2;
        *out_p = lr.p_value;
        Ok(())
    })
}

/// Univariate Cox model with Breslow ties: coefficient, standard error and
/// Wald p-value of covariate `x`.
///
/// # Safety
/// `times`, `events` and `x` must point to `n` elements; the outputs must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn aicac_cox_univariate(
    times: *const f64,
    events: *const u8,
    x: *const f64,
    n: usize,
    out_beta: *mut f64,
    out_se: *mut f64,
    out_p: *mut f64,
) -> AicacStatus {
    guard(|| {
        non_null(out_beta, "out_beta")?;
        non_null(out_se, "out_se")?;
        non_null(out_p, "out_p")?;
        let recs = records(times, events, Some(x), n)?;
        let fit = cox_fit(&recs, &["x"], &CoxOptions::default()).map_err(survival_failure)?;
        let c = &fit.coefficients[0];
        *out_beta = c.beta;
        *out_se = c.se;
        *out_p = c.p_value;
        Ok(())
    })
}
