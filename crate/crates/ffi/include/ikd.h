#ifndef IKD_H
#define IKD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes.
 */
typedef enum IkdStatus {
  IKD_STATUS_OK = 0,
  IKD_STATUS_NULL_POINTER = 1,
  IKD_STATUS_INVALID_ARGUMENT = 2,
  IKD_STATUS_IO = 3,
  IKD_STATUS_CHECKPOINT = 4,
  IKD_STATUS_MODEL = 5,
  IKD_STATUS_CALIBRATION = 6,
  IKD_STATUS_PANIC = 7,
} IkdStatus;

/*
 A loaded model. Create with `ikd_model_load`, release with `ikd_model_free`.
 */
typedef struct IkdModel IkdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Copies the last error message of this thread into `buf` (NUL-terminated,
 truncated to `len`). Returns the full message length without the NUL.

 # Safety
 `buf` must be null or point to `len` writable bytes.
 */
size_t ikd_last_error_message(char *buf, size_t len);

/*
 Loads a checkpoint written by the `ikd` tool.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum IkdStatus ikd_model_load(const char *path, struct IkdModel **out);

/*
 Releases a model; null is ignored.

 # Safety
 `model` must come from `ikd_model_load` and not be used afterwards.
 */
void ikd_model_free(struct IkdModel *model);

/*
 # Safety
 `model` must be a live handle; `out` must be writable.
 */
enum IkdStatus ikd_model_param_count(const struct IkdModel *model, size_t *out);

/*
 # Safety
 `model` must be a live handle; `out` must be writable.
 */
enum IkdStatus ikd_model_num_classes(const struct IkdModel *model, size_t *out);

/*
 Feature values per example (channel-first for convolutional models).

 # Safety
 `model` must be a live handle; `out` must be writable.
 */
enum IkdStatus ikd_model_input_len(const struct IkdModel *model, size_t *out);

/*
 Logits for `n` examples. `features` holds `n * input_len` values and
 `logits` receives `n * num_classes`.

 # Safety
 Buffers must hold the stated number of elements.
 */
enum IkdStatus ikd_model_forward(const struct IkdModel *model,
                                 const float *features,
                                 size_t n,
                                 float *logits,
                                 size_t logits_len);

/*
 Top-label ECE of `n` probability rows over `classes` classes with
 `n_bins` equal-width bins.

 # Safety
 `probs` holds `n * classes` values, `labels` holds `n`; `out` is writable.
 */
enum IkdStatus ikd_compute_ece(const double *probs,
                               const size_t *labels,
                               size_t n,
                               size_t classes,
                               size_t n_bins,
                               double *out);

/*
 Temperature minimizing the mean negative log-likelihood of `labels`
 under softmax(`logits` / T).

 # Safety
 `logits` holds `n * classes` values, `labels` holds `n`; `t_out` is writable.
 */
enum IkdStatus ikd_fit_temperature(const double *logits,
                                   const size_t *labels,
                                   size_t n,
                                   size_t classes,
                                   double *t_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IKD_H */
