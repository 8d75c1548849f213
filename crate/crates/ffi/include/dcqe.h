#ifndef DCQE_H
#define DCQE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result of every fallible call.
typedef enum DcqeStatus {
  DCQE_STATUS_OK = 0,
  // A required pointer argument was null.
  DCQE_STATUS_NULL_ARGUMENT = 1,
  // Argument values are out of range or inconsistent.
  DCQE_STATUS_INVALID_ARGUMENT = 2,
  DCQE_STATUS_IO = 3,
  // Malformed PNM or checkpoint data.
  DCQE_STATUS_FORMAT = 4,
  // Dimensions of two inputs disagree.
  DCQE_STATUS_SHAPE_MISMATCH = 5,
  // Computation produced or met a non-finite value.
  DCQE_STATUS_NON_FINITE = 6,
  // The caller's buffer is too small; nothing was written.
  DCQE_STATUS_BUFFER_TOO_SMALL = 7,
  // A Rust panic was caught at the boundary.
  DCQE_STATUS_INTERNAL = 99,
} DcqeStatus;

// A single- or three-channel image with samples in `[0, 1]`.
typedef struct DcqeImage DcqeImage;

// A trained enhancement model loaded from a checkpoint.
typedef struct DcqeModel DcqeModel;

// Library version as a static nul-terminated string.
const char *dcqe_version(void);

// Message describing the last failure on this thread; empty after a
// successful call. Valid until the next call on the same thread.
const char *dcqe_last_error(void);

// Copies `height·width·channels` interleaved samples into a new image.
//
// # Safety
// `samples` must point to that many readable doubles; `out` must be writable.
enum DcqeStatus dcqe_image_new(size_t height,
                               size_t width,
                               size_t channels,
                               const double *samples,
                               struct DcqeImage **out);

// Reads a binary PGM (P5) or PPM (P6) file.
//
// # Safety
// `path` must be a nul-terminated string; `out` must be writable.
enum DcqeStatus dcqe_image_read_pnm(const char *path, struct DcqeImage **out);

// Writes the image as P5 or P6 with byte rounding.
//
// # Safety
// `image` must be a live handle; `path` a nul-terminated string.
enum DcqeStatus dcqe_image_write_pnm(const struct DcqeImage *image, const char *path);

// # Safety
// `image` must be a live handle; the out pointers may be null.
enum DcqeStatus dcqe_image_dims(const struct DcqeImage *image,
                                size_t *height,
                                size_t *width,
                                size_t *channels);

// Copies the interleaved samples into `buffer` of `len` doubles.
//
// # Safety
// `image` must be a live handle; `buffer` must hold `len` doubles.
enum DcqeStatus dcqe_image_samples(const struct DcqeImage *image, double *buffer, size_t len);

// # Safety
// `image` must be null or a handle not yet freed.
void dcqe_image_free(struct DcqeImage *image);

// Compresses and decompresses with the block codec at `quality` (1–100).
//
// # Safety
// `image` must be a live handle; `out` must be writable.
enum DcqeStatus dcqe_codec_round_trip(const struct DcqeImage *image,
                                      int32_t quality,
                                      struct DcqeImage **out);

// PSNR in dB; `INFINITY` for identical images.
//
// # Safety
// `a` and `b` must be live handles; `out` must be writable.
enum DcqeStatus dcqe_psnr(const struct DcqeImage *a, const struct DcqeImage *b, double *out);

// Single-scale SSIM (11×11 Gaussian window, σ = 1.5).
//
// # Safety
// `a` and `b` must be live handles; `out` must be writable.
enum DcqeStatus dcqe_ssim(const struct DcqeImage *a, const struct DcqeImage *b, double *out);

// Degradation index of `values[0..len]` (cycles 1..n) in percent per
// cycle. `higher_is_better` selects the orientation.
//
// # Safety
// `values` must hold `len` doubles; `out` must be writable.
enum DcqeStatus dcqe_degradation_index(const double *values,
                                       size_t len,
                                       bool higher_is_better,
                                       double *out);

// Loads a model checkpoint written by the `train` command.
//
// # Safety
// `path` must be a nul-terminated string; `out` must be writable.
enum DcqeStatus dcqe_model_load(const char *path, struct DcqeModel **out);

// One enhancement pass, clamped to `[0, 1]`.
//
// # Safety
// `model` and `image` must be live handles; `out` must be writable.
enum DcqeStatus dcqe_model_enhance(const struct DcqeModel *model,
                                   const struct DcqeImage *image,
                                   struct DcqeImage **out);

// Mean absolute change `D(F(x), x)` of one unclamped enhancement pass.
//
// # Safety
// `model` and `image` must be live handles; `out` must be writable.
enum DcqeStatus dcqe_model_drift(const struct DcqeModel *model,
                                 const struct DcqeImage *image,
                                 double *out);

// # Safety
// `model` must be null or a handle not yet freed.
void dcqe_model_free(struct DcqeModel *model);

#endif /* DCQE_H */
