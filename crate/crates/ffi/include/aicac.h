#ifndef AICAC_H
#define AICAC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum AicacStatus {
  AICAC_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  AICAC_STATUS_NULL_POINTER = 1,
  /**
   * An argument was out of range or inconsistent.
   */
  AICAC_STATUS_INVALID_ARGUMENT = 2,
  /**
   * A file could not be read.
   */
  AICAC_STATUS_IO = 3,
  /**
   * Input bytes could not be parsed (DICOM, weights, JSON).
   */
  AICAC_STATUS_PARSE = 4,
  /**
   * The data admit no answer (one class only, no events, separation).
   */
  AICAC_STATUS_DEGENERATE = 5,
  /**
   * An internal error; please report it.
   */
  AICAC_STATUS_PANIC = 6,
} AicacStatus;

/**
 * Clip/log/normalize transform of CAC scores.
 */
typedef struct AicacLabelTransform AicacLabelTransform;

/**
 * A trained model with its preprocessing settings, dataset statistics and
 * label transform.
 */
typedef struct AicacModel AicacModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * The message of the last failed call on this thread; empty after a
 * success. The pointer stays valid until the next call on this thread.
 */
const char *aicac_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *aicac_version(void);

/**
 * Loads a model directory written by `aicac train` (`weights.bin` and
 * `model.json`). On success `*out` owns a handle for
 * [`aicac_model_free`].
 *
 * # Safety
 * `model_dir` must be a NUL-terminated UTF-8 path; `out` must be writable.
 */
enum AicacStatus aicac_model_load(const char *model_dir, struct AicacModel **out);

/**
 * Releases a model handle; null is ignored.
 *
 * # Safety
 * `model` must come from [`aicac_model_load`] and not be used afterwards.
 */
void aicac_model_free(struct AicacModel *model);

/**
 * Side length of the square model input (and of saliency maps).
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum AicacStatus aicac_model_input_dim(const struct AicacModel *model, size_t *out);

/**
 * Scores one DICOM file held in memory. Writes the predicted CAC score
 * (original units, within the clipping range) and, if `out_score` is not
 * null, the raw prediction in the normalized log domain.
 *
 * # Safety
 * `model` must be a live handle, `bytes` must point to `len` readable
 * bytes, `out_cac` must be writable and `out_score` null or writable.
 */
enum AicacStatus aicac_predict_dicom(const struct AicacModel *model,
                                     const uint8_t *bytes,
                                     size_t len,
                                     double *out_cac,
                                     double *out_score);

/**
 * Grad-CAM saliency of one DICOM file: `dim * dim` values in `[0, 1]`,
 * row-major, where `dim` is [`aicac_model_input_dim`]. `map_len` must equal
 * `dim * dim`.
 *
 * # Safety
 * `model` must be a live handle, `bytes` must point to `len` readable
 * bytes and `out_map` to `map_len` writable doubles.
 */
enum AicacStatus aicac_gradcam_dicom(const struct AicacModel *model,
                                     const uint8_t *bytes,
                                     size_t len,
                                     double *out_map,
                                     size_t map_len);

/**
 * Fits the transform on training scores with the default clipping (2000)
 * and offset (1e-5).
 *
 * # Safety
 * `scores` must point to `n` readable doubles; `out` must be writable.
 */
enum AicacStatus aicac_label_transform_fit(const double *scores,
                                           size_t n,
                                           struct AicacLabelTransform **out);

/**
 * Releases a label transform; null is ignored.
 *
 * # Safety
 * `lt` must come from [`aicac_label_transform_fit`] and not be used
 * afterwards.
 */
void aicac_label_transform_free(struct AicacLabelTransform *lt);

/**
 * Maps a CAC score into the normalized log domain.
 *
 * # Safety
 * `lt` must be a live handle; `out` must be writable.
 */
enum AicacStatus aicac_label_transform_apply(const struct AicacLabelTransform *lt,
                                             double cac,
                                             double *out);

/**
 * Maps a normalized-log value back to a CAC score in `[0, 2000]`.
 *
 * # Safety
 * `lt` must be a live handle; `out` must be writable.
 */
enum AicacStatus aicac_label_transform_inverse(const struct AicacLabelTransform *lt,
                                               double value,
                                               double *out);

/**
 * ROC AUC of `scores` against 0/1 `labels` (nonzero means positive), ties
 * counted as one half.
 *
 * # Safety
 * `scores` and `labels` must point to `n` readable elements; `out` must be
 * writable.
 */
enum AicacStatus aicac_roc_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Kaplan-Meier survival evaluated at each subject's own time:
 * `out_survival[i] = S(times[i])`.
 *
 * # Safety
 * `times`, `events` and `out_survival` must point to `n` elements.
 */
enum AicacStatus aicac_kaplan_meier(const double *times,
                                    const uint8_t *events,
                                    size_t n,
                                    double *out_survival);

/**
 * Two-group log-rank test; `group[i]` nonzero puts subject `i` in the
 * first group.
 *
 * # Safety
 * `times`, `events` and `group` must point to `n` elements; `out_chi2` and
 * `out_p` must be writable.
 */
enum AicacStatus aicac_log_rank(const double *times,
                                const uint8_t *events,
                                const uint8_t *group,
                                size_t n,
                                double *out_chi2,
                                double *out_p);

/**
 * Univariate Cox model with Breslow ties: coefficient, standard error and
 * Wald p-value of covariate `x`.
 *
 * # Safety
 * `times`, `events` and `x` must point to `n` elements; the outputs must be
 * writable.
 */
enum AicacStatus aicac_cox_univariate(const double *times,
                                      const uint8_t *events,
                                      const double *x,
                                      size_t n,
                                      double *out_beta,
                                      double *out_se,
                                      double *out_p);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AICAC_H */
