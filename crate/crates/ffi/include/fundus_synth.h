/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef FUNDUS_SYNTH_H
#define FUNDUS_SYNTH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum FsStatus {
  FS_STATUS_OK = 0,
  FS_STATUS_NULL_POINTER = 1,
  FS_STATUS_INVALID_ARGUMENT = 2,
  FS_STATUS_IO = 3,
  FS_STATUS_CHECKPOINT = 4,
  FS_STATUS_SHAPE = 5,
  FS_STATUS_NUMERIC = 6,
  FS_STATUS_CONFIG = 7,
  FS_STATUS_PANIC = 8,
} FsStatus;

/**
 * A trained model together with its sampling prior.
 */
typedef struct FsModel FsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread; do not free.
 */
const char *fs_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fs_version(void);

/**
 * Load a checkpoint file. On success `*out` receives a handle owned by the caller.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
 */
enum FsStatus fs_model_load(const char *path, struct FsModel **out);

/**
 * Release a handle from `fs_model_load`. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void fs_model_free(struct FsModel *model);

/**
 * Image edge length the model works at, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t fs_model_image_size(const struct FsModel *model);

/**
 * Whether the model carries a fitted prior (needed by `fs_model_sample`).
 *
 * # Safety
 * `model` must be null or a live handle.
 */
bool fs_model_has_prior(const struct FsModel *model);

/**
 * Encode and resynthesize `count` images. Both buffers hold `count·3·S·S` floats.
 *
 * # Safety
 * `model` must be a live handle; `input` and `output` must point to buffers of
 * the stated lengths and may not overlap.
 */
enum FsStatus fs_model_reconstruct(const struct FsModel *model,
                                   const float *input,
                                   size_t count,
                                   float *output,
                                   size_t output_len);

/**
 * Sample `count` novel images with truncation `psi` in [0, 1]. `output`
 * holds `count·3·S·S` floats.
 *
 * # Safety
 * `model` must be a live handle; `output` must point to `output_len` floats.
 */
enum FsStatus fs_model_sample(const struct FsModel *model,
                              size_t count,
                              uint64_t seed,
                              float psi,
                              float *output,
                              size_t output_len);

/**
 * Render one procedural toy fundus image of edge `size` into `output`
 * (`3·size·size` floats). `has_lesions` may be null.
 *
 * # Safety
 * `output` must point to `output_len` floats; `has_lesions` null or valid.
 */
enum FsStatus fs_toy_fundus(uint64_t seed,
                            size_t size,
                            float *output,
                            size_t output_len,
                            bool *has_lesions);

/**
 * SSIM of two `3×size×size` images with the default 11-tap Gaussian window.
 *
 * # Safety
 * `a` and `b` must each point to `3·size·size` floats; `out` must be valid.
 */
enum FsStatus fs_ssim(const float *a, const float *b, size_t size, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FUNDUS_SYNTH_H */
