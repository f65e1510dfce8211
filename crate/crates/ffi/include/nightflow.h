#ifndef NIGHTFLOW_H
#define NIGHTFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum NfStatus {
  NF_STATUS_OK = 0,
  NF_STATUS_INVALID_ARGUMENT = 1,
  NF_STATUS_DEGENERATE_INPUT = 2,
  NF_STATUS_NON_FINITE = 3,
  NF_STATUS_VERSION_MISMATCH = 4,
  NF_STATUS_IO = 5,
  NF_STATUS_CORRUPT_FILE = 6,
  NF_STATUS_NULL_POINTER = 7,
  NF_STATUS_PANIC = 8,
} NfStatus;

/**
 * Network selector for prediction and evaluation.
 */
typedef enum NfModelKind {
  NF_MODEL_KIND_DAY = 0,
  NF_MODEL_KIND_DAY_ON_NIGHT = 1,
  NF_MODEL_KIND_NIGHT = 2,
  NF_MODEL_KIND_EVENT = 3,
} NfModelKind;

/**
 * Training configuration.
 */
typedef struct NfConfig NfConfig;

/**
 * In-memory dataset.
 */
typedef struct NfDataset NfDataset;

/**
 * Trained parameters of one stage.
 */
typedef struct NfModel NfModel;

/**
 * Evaluation report.
 */
typedef struct NfReport NfReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *nf_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *nf_version(void);

/**
 * Default configuration. Never returns NULL.
 */
struct NfConfig *nf_config_new(void);

/**
 * Applies one `key=value` override, e.g. `"lambda3=0.5"`.
 *
 * # Safety
 * `cfg` must come from `nf_config_new`; `assignment` must be a NUL-terminated string.
 */
enum NfStatus nf_config_set(struct NfConfig *cfg, const char *assignment);

/**
 * # Safety
 * `cfg` must be NULL or a live handle from `nf_config_new`.
 */
void nf_config_free(struct NfConfig *cfg);

/**
 * Generates `count` square samples of side `size`.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum NfStatus nf_dataset_generate(uint64_t seed,
                                  size_t count,
                                  size_t size,
                                  double max_displacement,
                                  struct NfDataset **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid handle slot.
 */
enum NfStatus nf_dataset_load(const char *path, struct NfDataset **out);

/**
 * # Safety
 * `ds` must be a live dataset handle and `path` a NUL-terminated string.
 */
enum NfStatus nf_dataset_save(const struct NfDataset *ds, const char *path);

/**
 * Number of samples, or 0 for NULL.
 *
 * # Safety
 * `ds` must be NULL or a live dataset handle.
 */
size_t nf_dataset_len(const struct NfDataset *ds);

/**
 * # Safety
 * `ds` must be NULL or a live dataset handle.
 */
void nf_dataset_free(struct NfDataset *ds);

/**
 * Trains `stage` (1, 2 or 3). Stages 2 and 3 need the previous stage's
 * model in `prev`; stage 1 ignores it. `holdout` may be NULL.
 *
 * # Safety
 * Handles must be live or NULL where allowed; `out` must be a valid slot.
 */
enum NfStatus nf_train_stage(uint8_t stage,
                             const struct NfDataset *train,
                             const struct NfDataset *holdout,
                             const struct NfModel *prev,
                             const struct NfConfig *cfg,
                             struct NfModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid slot.
 */
enum NfStatus nf_model_load(const char *path, struct NfModel **out);

/**
 * # Safety
 * `model` must be a live model handle and `path` a NUL-terminated string.
 */
enum NfStatus nf_model_save(const struct NfModel *model, const char *path);

/**
 * Training stage (1, 2 or 3) that produced the model; 0 for NULL or any
 * other checkpoint kind.
 *
 * # Safety
 * `model` must be NULL or a live model handle.
 */
uint8_t nf_model_stage(const struct NfModel *model);

/**
 * # Safety
 * `model` must be NULL or a live model handle.
 */
void nf_model_free(struct NfModel *model);

/**
 * Predicts the flow of sample `index` into caller buffers `u` and `v`,
 * each `height * width` doubles in row-major order.
 *
 * # Safety
 * Handles must be live; `u` and `v` must each hold `len` doubles.
 */
enum NfStatus nf_predict(const struct NfModel *model,
                         enum NfModelKind kind,
                         const struct NfDataset *ds,
                         size_t index,
                         const struct NfConfig *cfg,
                         double *u,
                         double *v,
                         size_t len);

/**
 * Evaluates a model on a dataset.
 *
 * # Safety
 * Handles must be live; `out` must be a valid slot.
 */
enum NfStatus nf_evaluate(const struct NfModel *model,
                          enum NfModelKind kind,
                          const struct NfDataset *ds,
                          const struct NfConfig *cfg,
                          struct NfReport **out);

/**
 * Mean EPE, mean Fl-all (percent) and boundary-band EPE (NaN when the
 * data has no motion edges). Any output pointer may be NULL.
 *
 * # Safety
 * `report` must be a live handle; non-NULL outputs must be valid.
 */
enum NfStatus nf_report_metrics(const struct NfReport *report,
                                double *epe,
                                double *fl_all,
                                double *boundary_epe);

/**
 * Report as JSON. Release the string with `nf_string_free`.
 *
 * # Safety
 * `report` must be a live handle and `out` a valid pointer.
 */
enum NfStatus nf_report_json(const struct NfReport *report, char **out);

/**
 * # Safety
 * `report` must be NULL or a live report handle.
 */
void nf_report_free(struct NfReport *report);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library.
 */
void nf_string_free(char *s);

/**
 * EPE and Fl-all of a flow against ground truth over all pixels. Buffers
 * hold `height * width` doubles each.
 *
 * # Safety
 * All buffers must hold `height * width` doubles; outputs must be valid.
 */
enum NfStatus nf_flow_error(const double *u,
                            const double *v,
                            const double *gt_u,
                            const double *gt_v,
                            size_t height,
                            size_t width,
                            double *epe,
                            double *fl_all);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NIGHTFLOW_H */
