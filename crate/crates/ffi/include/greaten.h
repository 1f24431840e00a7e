#ifndef GREATEN_H
#define GREATEN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GreatenStatus {
  GREATEN_STATUS_OK = 0,
  GREATEN_STATUS_NULL_POINTER = 1,
  GREATEN_STATUS_INVALID_ARGUMENT = 2,
  GREATEN_STATUS_CONFIG = 3,
  GREATEN_STATUS_IO = 4,
  GREATEN_STATUS_SHAPE = 5,
  GREATEN_STATUS_CHECKPOINT = 6,
  GREATEN_STATUS_INTERNAL = 7,
} GreatenStatus;

/**
 * A full-resolution disparity map.
 */
typedef struct GreatenDisparity GreatenDisparity;

/**
 * A loaded model and its parameters.
 */
typedef struct GreatenModel GreatenModel;

/**
 * A stereo pair with ground truth.
 */
typedef struct GreatenSample GreatenSample;

/**
 * Metrics over all valid pixels. `epe_noc` and `epe_occ` are NaN when the
 * region is empty; percentages count pixels above 0.5, 1, 2 and 3 px.
 */
typedef struct GreatenMetrics {
  uint64_t valid_pixels;
  double epe;
  double bad[4];
  double epe_noc;
  double epe_occ;
} GreatenMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *greaten_version(void);

/**
 * Copy the calling thread's last error message into `buf` (truncated and
 * NUL-terminated when `len > 0`). Returns the full message length in bytes,
 * excluding the terminator.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t greaten_last_error_message(char *buf, size_t len);

/**
 * Load a checkpoint directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum GreatenStatus greaten_model_load(const char *dir, struct GreatenModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`greaten_model_load`] not yet freed.
 */
void greaten_model_free(struct GreatenModel *model);

/**
 * Render a synthetic scene with default geometry and textures.
 *
 * # Safety
 * `out` must be writable.
 */
enum GreatenStatus greaten_sample_generate(uint32_t height,
                                           uint32_t width,
                                           uint32_t max_disparity,
                                           uint64_t seed,
                                           struct GreatenSample **out);

/**
 * Read a sample directory as written by `greaten gen-data`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum GreatenStatus greaten_sample_load(const char *dir, struct GreatenSample **out);

/**
 * # Safety
 * `sample` must be a live handle; `height` and `width` must be writable.
 */
enum GreatenStatus greaten_sample_dims(const struct GreatenSample *sample,
                                       uint32_t *height,
                                       uint32_t *width);

/**
 * # Safety
 * `sample` must be null or a live handle.
 */
void greaten_sample_free(struct GreatenSample *sample);

/**
 * Predict disparity for `sample`. `iters == 0` uses the model's
 * inference-time iteration count. `prior_seed` seeds the stub depth prior
 * for variants that consume one.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum GreatenStatus greaten_infer(const struct GreatenModel *model,
                                 const struct GreatenSample *sample,
                                 uint32_t iters,
                                 uint64_t prior_seed,
                                 struct GreatenDisparity **out);

/**
 * # Safety
 * `disp` must be a live handle; `height` and `width` must be writable.
 */
enum GreatenStatus greaten_disparity_dims(const struct GreatenDisparity *disp,
                                          uint32_t *height,
                                          uint32_t *width);

/**
 * Copy the row-major map into `buf`, which must hold exactly
 * `height * width` floats.
 *
 * # Safety
 * `buf` must point to `len` writable floats.
 */
enum GreatenStatus greaten_disparity_copy(const struct GreatenDisparity *disp,
                                          float *buf,
                                          size_t len);

/**
 * # Safety
 * `disp` must be a live handle; `path` a NUL-terminated string.
 */
enum GreatenStatus greaten_disparity_write_pfm(const struct GreatenDisparity *disp,
                                               const char *path);

/**
 * # Safety
 * `disp` must be null or a live handle.
 */
void greaten_disparity_free(struct GreatenDisparity *disp);

/**
 * Run inference with the model's inference iteration count and score the
 * result against the sample's ground truth.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum GreatenStatus greaten_evaluate(const struct GreatenModel *model,
                                    const struct GreatenSample *sample,
                                    uint64_t prior_seed,
                                    struct GreatenMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GREATEN_H */
