#ifndef SPIKEGNO_H
#define SPIKEGNO_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every function.
 */
typedef enum {
  SPIKEGNO_STATUS_OK = 0,
  SPIKEGNO_STATUS_NULL_POINTER = 1,
  SPIKEGNO_STATUS_INVALID_ARGUMENT = 2,
  SPIKEGNO_STATUS_IO = 3,
  SPIKEGNO_STATUS_FORMAT = 4,
  SPIKEGNO_STATUS_INCOMPATIBLE = 5,
  SPIKEGNO_STATUS_NUMERIC = 6,
  SPIKEGNO_STATUS_BUFFER_TOO_SMALL = 7,
  SPIKEGNO_STATUS_PANIC = 8,
} SpikegnoStatus;

/**
 * A dataset read from disk in physical units.
 */
typedef struct SpikegnoDataset SpikegnoDataset;

/**
 * A trained model bound to the mesh of a dataset.
 */
typedef struct SpikegnoPredictor SpikegnoPredictor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *spikegno_version(void);

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to fit) and returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t spikegno_last_error_message(char *buf, size_t len);

/**
 * Opens a dataset directory written by `spikegno generate`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
SpikegnoStatus spikegno_dataset_open(const char *path, SpikegnoDataset **out);

/**
 * # Safety
 * `ds` must be null or a handle from [`spikegno_dataset_open`] not yet freed.
 */
void spikegno_dataset_free(SpikegnoDataset *ds);

/**
 * Node count, channel count, input length and sample count.
 *
 * # Safety
 * `ds` must be a live handle; each output pointer may be null.
 */
SpikegnoStatus spikegno_dataset_dims(const SpikegnoDataset *ds,
                                     size_t *n,
                                     size_t *k,
                                     size_t *q,
                                     size_t *count);

/**
 * Copies sample `index` into `input` (length q) and `output` (n x k,
 * row-major), both in physical units. Either buffer may be null.
 *
 * # Safety
 * Non-null buffers must be valid for the stated lengths.
 */
SpikegnoStatus spikegno_dataset_sample(const SpikegnoDataset *ds,
                                       size_t index,
                                       double *input,
                                       size_t input_len,
                                       double *output,
                                       size_t output_len);

/**
 * Loads a model checkpoint and binds it to the mesh of `ds`. The dataset is
 * copied, so `ds` may be freed afterwards.
 *
 * # Safety
 * `checkpoint` must be a NUL-terminated string, `ds` a live handle and `out`
 * a valid pointer.
 */
SpikegnoStatus spikegno_predictor_new(const char *checkpoint,
                                      const SpikegnoDataset *ds,
                                      SpikegnoPredictor **out);

/**
 * # Safety
 * `p` must be null or a handle from [`spikegno_predictor_new`] not yet freed.
 */
void spikegno_predictor_free(SpikegnoPredictor *p);

/**
 * Predicts the dense field for one physical input of length q and writes it
 * to `output` as n x k row-major physical values.
 *
 * # Safety
 * `input` must be valid for `input_len` values and `output` for
 * `output_len` values.
 */
SpikegnoStatus spikegno_predict(const SpikegnoPredictor *p,
                                const double *input,
                                size_t input_len,
                                double *output,
                                size_t output_len);

/**
 * Per-channel relative L2 error of `pred` against `truth` (both n x k
 * row-major) and its channel mean.
 *
 * # Safety
 * `pred` and `truth` must be valid for `n * k` values, `per_channel` for `k`
 * values (or null) and `mean` a valid pointer (or null).
 */
SpikegnoStatus spikegno_relative_l2(const double *pred,
                                    const double *truth,
                                    size_t n,
                                    size_t k,
                                    double *per_channel,
                                    double *mean);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPIKEGNO_H */
