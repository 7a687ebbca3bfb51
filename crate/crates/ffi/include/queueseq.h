#ifndef QUEUESEQ_FFI_H
#define QUEUESEQ_FFI_H

/* Generated by cbindgen from queueseq-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by fallible calls.
 */
typedef enum QsStatus {
  QsStatus_Ok = 0,
  QsStatus_InvalidArgument = 1,
  QsStatus_IoError = 2,
  QsStatus_ParseError = 3,
  QsStatus_InternalError = 4,
} QsStatus;

/**
 * Loaded event-table dataset (schema plus trajectories).
 */
typedef struct QsDataset QsDataset;

/**
 * Loaded model checkpoint.
 */
typedef struct QsModel QsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Crate version as a static NUL-terminated string; do not free.
 */
const char *qs_version(void);

/**
 * Copy the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `cap > 0`). Returns the full message
 * length in bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must point to at least `cap` writable bytes, or be null with
 * `cap == 0`.
 */
uintptr_t qs_last_error(char *buf, uintptr_t cap);

/**
 * Simulate `n_trajectories` event tables of `n_events` each and write
 * them as JSONL. `config_json` is the tagged system object accepted by
 * the CLI (e.g. `{"type":"mmn","lambdas":[0.5],"nus":[1.0],"n_servers":1}`).
 *
 * # Safety
 * `config_json` and `out_path` must be NUL-terminated strings.
 */
enum QsStatus qs_simulate(const char *config_json,
                          uint64_t n_trajectories,
                          uint64_t n_events,
                          uint64_t seed,
                          const char *out_path);

/**
 * Load a JSONL event-table file; returns null on failure.
 *
 * # Safety
 * `path` must be a NUL-terminated string. Free the result with
 * [`qs_dataset_free`].
 */
struct QsDataset *qs_dataset_load(const char *path);

/**
 * # Safety
 * `ds` must come from [`qs_dataset_load`] and not have been freed.
 */
void qs_dataset_free(struct QsDataset *ds);

/**
 * Number of trajectories in the dataset.
 *
 * # Safety
 * `ds` must be a live dataset handle.
 */
uint64_t qs_dataset_len(const struct QsDataset *ds);

/**
 * Fraction of trajectories that replay without a schema violation.
 *
 * # Safety
 * `ds` must be a live dataset handle.
 */
double qs_dataset_valid_fraction(const struct QsDataset *ds);

/**
 * Closed-form optimal event and time losses of an M/M/1 queue.
 *
 * # Safety
 * `out_event` and `out_time` must be valid writable pointers.
 */
enum QsStatus qs_mm1_optimal_losses(double lambda, double nu, double *out_event, double *out_time);

/**
 * Load a model checkpoint; returns null on failure.
 *
 * # Safety
 * `path` must be a NUL-terminated string. Free the result with
 * [`qs_model_free`].
 */
struct QsModel *qs_model_load(const char *path);

/**
 * # Safety
 * `model` must come from [`qs_model_load`] and not have been freed.
 */
void qs_model_free(struct QsModel *model);

/**
 * Total number of model parameters.
 *
 * # Safety
 * `model` must be a live model handle.
 */
uint64_t qs_model_num_params(const struct QsModel *model);

/**
 * Teacher-forced losses of the model on a dataset. Outputs may be null
 * to skip individual values.
 *
 * # Safety
 * `model` and `ds` must be live handles; non-null outputs must be
 * writable.
 */
enum QsStatus qs_model_eval(const struct QsModel *model,
                            const struct QsDataset *ds,
                            double *out_event_loss,
                            double *out_time_sq,
                            double *out_class_loss,
                            double *out_time_nll);

/**
 * Sample trajectories from a trained model and write them as JSONL.
 * The system config supplies the schema and empty initial state.
 *
 * # Safety
 * `model` must be a live handle; strings must be NUL-terminated.
 */
enum QsStatus qs_model_generate(const struct QsModel *model,
                                const char *system_config_json,
                                uint64_t n_trajectories,
                                uint64_t n_events,
                                double temperature,
                                uint64_t seed,
                                const char *out_path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QUEUESEQ_FFI_H */
