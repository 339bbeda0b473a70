#ifndef SAMDA_H
#define SAMDA_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum SamdaStatus {
  SAMDA_STATUS_OK = 0,
  SAMDA_STATUS_NULL_POINTER = 1,
  SAMDA_STATUS_INVALID_ARGUMENT = 2,
  SAMDA_STATUS_FORMAT = 3,
  SAMDA_STATUS_INTEGRITY = 4,
  SAMDA_STATUS_IO = 5,
  SAMDA_STATUS_BUFFER_TOO_SMALL = 6,
  SAMDA_STATUS_PANIC = 7,
} SamdaStatus;

/**
 * Opaque model handle.
 */
typedef struct SamdaModel SamdaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` as a
 * NUL-terminated string. `*len` receives the byte length without the NUL;
 * a null `buf` only queries the length.
 *
 * # Safety
 * `len` must be valid for writes; `buf`, when non-null, for `cap` bytes.
 */
enum SamdaStatus samda_last_error(char *buf, size_t cap, size_t *len);

/**
 * Loads an `SDCK` checkpoint together with its `.json` sidecar.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` valid for writes.
 */
enum SamdaStatus samda_model_load(const char *path, struct SamdaModel **out);

/**
 * Releases a handle from [`samda_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must come from [`samda_model_load`] and not be freed twice.
 */
void samda_model_free(struct SamdaModel *model);

/**
 * Side length of the square input image.
 *
 * # Safety
 * `model` must be a live handle; `out` valid for writes.
 */
enum SamdaStatus samda_model_image_size(const struct SamdaModel *model, size_t *out);

/**
 * Number of parameters, all of them or only the trainable ones.
 *
 * # Safety
 * `model` must be a live handle; `out` valid for writes.
 */
enum SamdaStatus samda_model_param_count(const struct SamdaModel *model,
                                         bool trainable_only,
                                         size_t *out);

/**
 * Predicts mask logits for one image.
 *
 * `image` holds `size * size` intensities in row-major order. Points are
 * given as `n_points` pairs `(x, y)` in `points` with one label each in
 * `labels` (1 positive, 0 negative). `logits` receives `size * size`
 * values; `iou` the predicted IoU.
 *
 * # Safety
 * All pointers must be valid for the lengths described above.
 */
enum SamdaStatus samda_model_predict(const struct SamdaModel *model,
                                     const float *image,
                                     size_t image_len,
                                     const float *points,
                                     const int32_t *labels,
                                     size_t n_points,
                                     float *logits,
                                     size_t logits_len,
                                     float *iou);

/**
 * Adapter parameter count for `layers` adapted layers of width `d_t`,
 * from the closed form. `registry` (optional) receives the count obtained
 * by registering the tensors.
 *
 * # Safety
 * `out` must be valid for writes; `registry` null or valid for writes.
 */
enum SamdaStatus samda_adapter_param_count(size_t n_prompts,
                                           size_t d_a,
                                           size_t d_k,
                                           size_t d_v,
                                           size_t d_t,
                                           size_t layers,
                                           size_t *out,
                                           size_t *registry);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAMDA_H */
