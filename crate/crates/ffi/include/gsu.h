#ifndef GSU_H
#define GSU_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every exported function.
typedef enum GsuStatus {
  GSU_STATUS_OK = 0,
  GSU_STATUS_NULL_POINTER = 1,
  GSU_STATUS_INVALID_ARGUMENT = 2,
  GSU_STATUS_SHAPE_MISMATCH = 3,
  GSU_STATUS_NON_FINITE = 4,
  GSU_STATUS_FORMAT = 5,
  GSU_STATUS_IO = 6,
  GSU_STATUS_PANIC = 7,
} GsuStatus;

// A trained denoiser loaded from a checkpoint.
typedef struct GsuModel GsuModel;

// A depth video (`frames×1×height×width`, values in `[0, 1]`).
typedef struct GsuVideo GsuVideo;

// Sampling options; see [`gsu_sample_options_default`].
typedef struct GsuSampleOptions {
  uint32_t steps;
  // Frames per denoiser call.
  uint32_t clip;
  // Non-zero samples each frame on its own.
  uint8_t ablate_frames;
  // Non-zero adds posterior noise between steps.
  uint8_t stochastic;
  uint64_t seed;
} GsuSampleOptions;

// Scores of a prediction against a reference.
typedef struct GsuMetrics {
  // Decibels; `INFINITY` when the videos are identical.
  double psnr_db;
  double ssim;
  double consistency;
} GsuMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null. Valid until the next
// failing call on the same thread.
const char *gsu_last_error(void);

// Copy `frames·height·width` depth values into a new video.
//
// # Safety
// `data` must point to that many floats; `out` must be writable.
enum GsuStatus gsu_video_new(size_t frames,
                             size_t height,
                             size_t width,
                             const float *data,
                             struct GsuVideo **out);

// Read a GSU1 depth-video file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum GsuStatus gsu_video_read(const char *path, struct GsuVideo **out);

// Write a video as a GSU1 file.
//
// # Safety
// `video` must be a live handle and `path` a NUL-terminated string.
enum GsuStatus gsu_video_write(const struct GsuVideo *video, const char *path);

// Dimensions of a video.
//
// # Safety
// `video` must be a live handle; output pointers must be writable.
enum GsuStatus gsu_video_shape(const struct GsuVideo *video,
                               size_t *frames,
                               size_t *height,
                               size_t *width);

// Copy the depth values (row-major) into `out`, which holds `len` floats.
//
// # Safety
// `video` must be a live handle and `out` writable for `len` floats.
enum GsuStatus gsu_video_copy_data(const struct GsuVideo *video, float *out, size_t len);

// Release a video; null is ignored.
//
// # Safety
// `video` must come from this library and not be used afterwards.
void gsu_video_free(struct GsuVideo *video);

// Apply a vertical-line (keep every `keep_every`-th row) and pepper
// (`drop_num/drop_den`) mask. The pepper stream is keyed by `seed` and
// `sequence_id`.
//
// # Safety
// `video` must be a live handle, `sequence_id` a NUL-terminated string and
// `out` writable.
enum GsuStatus gsu_degrade(const struct GsuVideo *video,
                           uint32_t keep_every,
                           uint32_t drop_num,
                           uint32_t drop_den,
                           uint64_t seed,
                           const char *sequence_id,
                           struct GsuVideo **out);

// Fill empty pixels with an interpolation baseline: 0 nearest, 1 bilinear,
// 2 bicubic.
//
// # Safety
// `video` must be a live handle and `out` writable.
enum GsuStatus gsu_baseline(const struct GsuVideo *video, uint32_t method, struct GsuVideo **out);

// Load a checkpoint's EMA weights.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum GsuStatus gsu_model_load(const char *path, struct GsuModel **out);

// Release a model; null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void gsu_model_free(struct GsuModel *model);

// Defaults: 32 steps, 10-frame clips, video mode, stochastic, seed 0.
struct GsuSampleOptions gsu_sample_options_default(void);

// Inpaint the empty pixels of a degraded video.
//
// # Safety
// `model` and `video` must be live handles, `options` readable and `out`
// writable.
enum GsuStatus gsu_sample(const struct GsuModel *model,
                          const struct GsuVideo *video,
                          const struct GsuSampleOptions *options,
                          struct GsuVideo **out);

// PSNR (peak 1), SSIM and temporal consistency of `pred` against `reference`.
//
// # Safety
// Both videos must be live handles and `out` writable.
enum GsuStatus gsu_metrics(const struct GsuVideo *pred,
                           const struct GsuVideo *reference,
                           struct GsuMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GSU_H */
