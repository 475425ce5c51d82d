#ifndef SSATTN_H
#define SSATTN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SsattnStatus {
  SSATTN_STATUS_OK = 0,
  SSATTN_STATUS_NULL_POINTER = 1,
  SSATTN_STATUS_INVALID_ARGUMENT = 2,
  SSATTN_STATUS_SHAPE = 3,
  SSATTN_STATUS_CONFIG = 4,
  SSATTN_STATUS_FORMAT = 5,
  SSATTN_STATUS_NUMERIC = 6,
  SSATTN_STATUS_STATE = 7,
  SSATTN_STATUS_IO = 8,
  SSATTN_STATUS_BUFFER_TOO_SMALL = 9,
  SSATTN_STATUS_PANIC = 10,
} SsattnStatus;

/**
 * Opaque SSViT model with f32 weights.
 */
typedef struct SsattnModel SsattnModel;

/**
 * Opaque attention layer: configuration plus f32 weights.
 */
typedef struct SsattnS3a SsattnS3a;

/**
 * Opaque f32 tensor.
 */
typedef struct SsattnTensor SsattnTensor;

/**
 * Attention layer settings. A stride of 0 on either axis selects the
 * automatic stride.
 */
typedef struct SsattnS3aConfig {
  size_t channels;
  size_t heads;
  size_t window_h;
  size_t window_w;
  size_t anchors_h;
  size_t anchors_w;
  size_t stride_h;
  size_t stride_w;
  bool lce;
} SsattnS3aConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * Valid until the next `ssattn_*` call on the same thread.
 */
const char *ssattn_last_error(void);

/**
 * Static name of a status code.
 */
const char *ssattn_status_name(enum SsattnStatus status);

/**
 * Creates a tensor of `shape[0..rank]`, copying `data` (`NULL` for zeros).
 *
 * # Safety
 * `shape` must point to `rank` values; `data`, when non-null, to as many
 * floats as the shape holds; `out` must be writable.
 */
enum SsattnStatus ssattn_tensor_new(const size_t *shape,
                                    size_t rank,
                                    const float *data,
                                    struct SsattnTensor **out);

/**
 * # Safety
 * `t` must come from this library and not be used afterwards.
 */
void ssattn_tensor_free(struct SsattnTensor *t);

/**
 * Number of axes; 0 for a null handle.
 *
 * # Safety
 * `t` must be null or a live tensor handle.
 */
size_t ssattn_tensor_rank(const struct SsattnTensor *t);

/**
 * Number of elements; 0 for a null handle.
 *
 * # Safety
 * `t` must be null or a live tensor handle.
 */
size_t ssattn_tensor_numel(const struct SsattnTensor *t);

/**
 * Copies the shape into `dims[0..cap]`.
 *
 * # Safety
 * `t` must be a live handle and `dims` writable for `cap` values.
 */
enum SsattnStatus ssattn_tensor_shape(const struct SsattnTensor *t, size_t *dims, size_t cap);

/**
 * Copies the elements into `buf[0..len]`.
 *
 * # Safety
 * `t` must be a live handle and `buf` writable for `len` floats.
 */
enum SsattnStatus ssattn_tensor_read(const struct SsattnTensor *t, float *buf, size_t len);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum SsattnStatus ssattn_tensor_load(const char *path, struct SsattnTensor **out);

/**
 * # Safety
 * `t` must be a live handle and `path` a NUL-terminated string.
 */
enum SsattnStatus ssattn_tensor_save(const struct SsattnTensor *t, const char *path);

/**
 * Builds a randomly initialized preset (`"ssvit-t"`, `"ssvit-s"`, ...).
 *
 * # Safety
 * `preset` must be a NUL-terminated string and `out` writable.
 */
enum SsattnStatus ssattn_model_new(const char *preset, uint64_t seed, struct SsattnModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum SsattnStatus ssattn_model_load(const char *path, struct SsattnModel **out);

/**
 * # Safety
 * `m` must be a live handle and `path` a NUL-terminated string.
 */
enum SsattnStatus ssattn_model_save(const struct SsattnModel *m, const char *path);

/**
 * # Safety
 * `m` must come from this library and not be used afterwards.
 */
void ssattn_model_free(struct SsattnModel *m);

/**
 * Scalar parameter count of a live model; 0 for a null handle.
 *
 * # Safety
 * `m` must be null or a live handle.
 */
uint64_t ssattn_model_num_params(const struct SsattnModel *m);

/**
 * Logits for a `[3, H, W]` image. Handles may be shared across threads.
 *
 * # Safety
 * `m` and `image` must be live handles and `out` writable.
 */
enum SsattnStatus ssattn_model_forward(const struct SsattnModel *m,
                                       const struct SsattnTensor *image,
                                       struct SsattnTensor **out);

/**
 * Analytic parameter count of a preset.
 *
 * # Safety
 * `preset` must be a NUL-terminated string and `out` writable.
 */
enum SsattnStatus ssattn_count_params(const char *preset, uint64_t *out);

/**
 * Multiply-accumulates of one forward pass of a preset at `height × width`.
 *
 * # Safety
 * `preset` must be a NUL-terminated string and `out` writable.
 */
enum SsattnStatus ssattn_count_flops(const char *preset,
                                     size_t height,
                                     size_t width,
                                     uint64_t *out);

/**
 * Attention layer with `N(0, weight_std²)` weights and zero biases.
 *
 * # Safety
 * `config` must be readable and `out` writable.
 */
enum SsattnStatus ssattn_s3a_new(const struct SsattnS3aConfig *config,
                                 uint64_t seed,
                                 double weight_std,
                                 struct SsattnS3a **out);

/**
 * # Safety
 * `layer` must come from this library and not be used afterwards.
 */
void ssattn_s3a_free(struct SsattnS3a *layer);

/**
 * Applies the layer to a `[C, H, W]` tensor.
 *
 * # Safety
 * `layer` and `x` must be live handles and `out` writable.
 */
enum SsattnStatus ssattn_s3a_forward(const struct SsattnS3a *layer,
                                     const struct SsattnTensor *x,
                                     struct SsattnTensor **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SSATTN_H */
