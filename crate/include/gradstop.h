#ifndef GRADSTOP_H
#define GRADSTOP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GsStatus {
  GS_STATUS_OK = 0,
  GS_STATUS_NULL_POINTER = 1,
  GS_STATUS_INVALID_ARGUMENT = 2,
  GS_STATUS_SIZE_MISMATCH = 3,
  GS_STATUS_DIVERGED = 4,
  GS_STATUS_PARSE = 5,
  GS_STATUS_DATASET = 6,
  GS_STATUS_IO = 7,
  GS_STATUS_PANIC = 8,
} GsStatus;

/**
 * A trained model loaded from a model file.
 */
typedef struct GsModel GsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (nul-terminated,
 * truncated to `len`). Returns the full message length without the nul.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t gs_last_error(char *buf, size_t len);

/**
 * Loads a model file. On success `*out` owns a handle to release with
 * `gs_model_free`.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum GsStatus gs_model_load(const char *path, struct GsModel **out);

/**
 * # Safety
 * `model` must be null or a handle from `gs_model_load` not freed before.
 */
void gs_model_free(struct GsModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum GsStatus gs_model_stop_time(const struct GsModel *model, double *out);

/**
 * Trained depth `S` and number of experts.
 *
 * # Safety
 * `model` must be a live handle; `depth` and `num_kernels` valid pointers.
 */
enum GsStatus gs_model_shape(const struct GsModel *model, size_t *depth, size_t *num_kernels);

/**
 * Runs the model's flow on `input` to `stop_time` (a negative value or NaN
 * picks the trained one) and writes `width * height` values to `output`.
 *
 * # Safety
 * `input` and `output` must be valid for `width * height` doubles.
 */
enum GsStatus gs_restore(const struct GsModel *model,
                         size_t width,
                         size_t height,
                         const double *input,
                         double stop_time,
                         double *output);

/**
 * PSNR in decibels of two buffers of `len` values.
 *
 * # Safety
 * `a` and `b` must be valid for `len` doubles and `out` a valid pointer.
 */
enum GsStatus gs_psnr(const double *a, const double *b, size_t len, double peak, double *out);

/**
 * Per-step intensity multiplier `1 - lambda T / S`.
 */
double gs_contrast_factor(double lambda, double stop_time, size_t depth);

/**
 * Optimal stopping time of the two-dimensional toy problem on its grid.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum GsStatus gs_toy2d_stop_time(double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRADSTOP_H */
