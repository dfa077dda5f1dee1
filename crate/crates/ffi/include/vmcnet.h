#ifndef VMCNET_H
#define VMCNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum VmcStatus {
  VMC_STATUS_OK = 0,
  VMC_STATUS_NULL_POINTER = 1,
  VMC_STATUS_INVALID_ARGUMENT = 2,
  VMC_STATUS_CONFIG = 3,
  VMC_STATUS_SHAPE = 4,
  VMC_STATUS_IO = 5,
  VMC_STATUS_FORMAT = 6,
  VMC_STATUS_NUMERIC = 7,
  VMC_STATUS_PANIC = 8,
} VmcStatus;

/**
 * Values accepted by the `mode` argument of [`vmc_model_forward`].
 */
typedef enum VmcMode {
  /**
   * Use the mode the model was configured with.
   */
  VMC_MODE_CONFIGURED = -1,
  VMC_MODE_FULL = 0,
  VMC_MODE_FM_STAR = 1,
  VMC_MODE_CNN_ONLY = 2,
  VMC_MODE_BASELINE = 3,
} VmcMode;

/**
 * Opaque model handle.
 */
typedef struct VmcModel VmcModel;

/**
 * Opaque forward-pass result.
 */
typedef struct VmcPyramid VmcPyramid;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *vmc_last_error_message(void);

/**
 * Builds a model from a JSON run configuration. `config_json` may be null
 * for the defaults; `seed` always overrides the configured seed.
 *
 * # Safety
 * `config_json` is null or a NUL-terminated string; `out` is writable.
 */
enum VmcStatus vmc_model_new(const char *config_json, uint64_t seed, struct VmcModel **out);

/**
 * # Safety
 * `model` is null or a handle from [`vmc_model_new`] not yet freed.
 */
void vmc_model_free(struct VmcModel *model);

/**
 * Replaces the model weights with a `VMCW` container.
 *
 * # Safety
 * `model` is a live handle; `path` is a NUL-terminated string.
 */
enum VmcStatus vmc_model_load_weights(struct VmcModel *model, const char *path);

/**
 * Element counts of the frozen and trainable parameters.
 *
 * # Safety
 * `model` is a live handle; `frozen` and `trainable` are writable.
 */
enum VmcStatus vmc_model_parameter_counts(const struct VmcModel *model,
                                          uint64_t *frozen,
                                          uint64_t *trainable);

/**
 * Forward pass on `image` (`n×h×w×3`, row-major, values as `double`).
 * `mode` is a [`VmcMode`] value.
 *
 * # Safety
 * `model` is a live handle; `image` holds `n·h·w·3` doubles; `out` is
 * writable.
 */
enum VmcStatus vmc_model_forward(const struct VmcModel *model,
                                 const double *image,
                                 size_t n,
                                 size_t h,
                                 size_t w,
                                 int32_t mode,
                                 bool full_depth,
                                 struct VmcPyramid **out);

/**
 * # Safety
 * `pyramid` is null or a handle from [`vmc_model_forward`] not yet freed.
 */
void vmc_pyramid_free(struct VmcPyramid *pyramid);

/**
 * Writes the extents of `level` (0..3 for the pyramid at 1/4..1/32, 4 for
 * the dense ViT feature) into `shape[0..4]`, padding with 1, and its rank
 * into `rank`.
 *
 * # Safety
 * `pyramid` is a live handle; `shape` has room for 4 values; `rank` is
 * writable.
 */
enum VmcStatus vmc_pyramid_level_shape(const struct VmcPyramid *pyramid,
                                       size_t level_index,
                                       size_t *shape,
                                       size_t *rank);

/**
 * Copies `level` into `dst`, which must hold exactly its element count.
 *
 * # Safety
 * `pyramid` is a live handle; `dst` has room for `len` doubles.
 */
enum VmcStatus vmc_pyramid_level_data(const struct VmcPyramid *pyramid,
                                      size_t level_index,
                                      double *dst,
                                      size_t len);

/**
 * `out = s_p^γ · s_vlm^(1−γ)` over `len` scores.
 *
 * # Safety
 * `s_p`, `s_vlm` and `out` each hold `len` doubles.
 */
enum VmcStatus vmc_fuse_scores(const double *s_p,
                               const double *s_vlm,
                               size_t len,
                               double gamma,
                               double *out);

/**
 * `out[r, k] = softmax_k(β · cos(region[r], text[k]))` for `n` regions,
 * `k` unit-length text rows and feature width `d`.
 *
 * # Safety
 * `region` holds `n·d`, `text` holds `k·d` and `out` holds `n·k` doubles.
 */
enum VmcStatus vmc_vlm_scores(const double *region,
                              size_t n,
                              const double *text,
                              size_t k,
                              size_t d,
                              double beta,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VMCNET_H */
