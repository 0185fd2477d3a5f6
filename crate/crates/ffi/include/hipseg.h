#ifndef HIPSEG_H
#define HIPSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum HsStatus {
  HS_STATUS_OK = 0,
  HS_STATUS_NULL_POINTER = 1,
  HS_STATUS_INVALID_ARGUMENT = 2,
  HS_STATUS_SHAPE_MISMATCH = 3,
  /**
   * Missing or unusable orientation metadata.
   */
  HS_STATUS_ORIENTATION = 4,
  /**
   * A mask without foreground where one is required.
   */
  HS_STATUS_EMPTY_DATA = 5,
  HS_STATUS_IO = 6,
  /**
   * Malformed NIfTI, checkpoint or other file content.
   */
  HS_STATUS_FORMAT = 7,
  HS_STATUS_TRAINING = 8,
  /**
   * A Rust panic was caught at the boundary.
   */
  HS_STATUS_PANIC = 9,
} HsStatus;

/**
 * The three orientation networks.
 */
typedef struct HsEnsemble HsEnsemble;

typedef struct HsMask HsMask;

/**
 * A volume together with the header it was read from.
 */
typedef struct HsVolume HsVolume;

typedef struct HsPredictOptions {
  /**
   * Consensus threshold in (0, 1).
   */
  float threshold;
  /**
   * Connected components kept.
   */
  size_t keep;
  /**
   * 6 or 26.
   */
  uint32_t connectivity;
  size_t workers;
  /**
   * Treat volumes without orientation metadata as canonical.
   */
  bool assume_canonical;
} HsPredictOptions;

typedef struct HsScores {
  double dice_both;
  double dice_left;
  double dice_right;
  double precision;
  double recall;
} HsScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failed call on this thread; empty after a
 * successful call. Valid until the next call on the same thread.
 */
const char *hs_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *hs_version(void);

struct HsPredictOptions hs_predict_options_default(void);

/**
 * Reads a NIfTI (`.nii`, `.nii.gz`) or raw volume.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum HsStatus hs_volume_read(const char *path, struct HsVolume **out);

/**
 * Copies `x*y*z` floats into a new volume in canonical orientation.
 * `spacing` may be null for 1 mm isotropic.
 *
 * # Safety
 * `data` must hold `shape[0]*shape[1]*shape[2]` floats; `shape` three
 * values; `spacing` null or three values; `out` must be writable.
 */
enum HsStatus hs_volume_from_data(const float *data,
                                  const size_t *shape,
                                  const double *spacing,
                                  struct HsVolume **out);

/**
 * # Safety
 * `volume` must be a live handle; `shape` must have room for three values.
 */
enum HsStatus hs_volume_shape(const struct HsVolume *volume, size_t *shape);

/**
 * # Safety
 * `volume` must come from this library and not be used afterwards; null
 * is ignored.
 */
void hs_volume_free(struct HsVolume *volume);

/**
 * Copies `x*y*z` bytes into a new mask; nonzero is foreground.
 *
 * # Safety
 * `data` must hold `shape[0]*shape[1]*shape[2]` bytes; `out` writable.
 */
enum HsStatus hs_mask_from_data(const uint8_t *data, const size_t *shape, struct HsMask **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum HsStatus hs_mask_read(const char *path, struct HsMask **out);

/**
 * Writes `mask` as NIfTI on the grid of `reference`.
 *
 * # Safety
 * Handles must be live; `path` must be a NUL-terminated string.
 */
enum HsStatus hs_mask_write(const struct HsMask *mask,
                            const struct HsVolume *reference,
                            const char *path);

/**
 * # Safety
 * `mask` must be a live handle; `shape` must have room for three values.
 */
enum HsStatus hs_mask_shape(const struct HsMask *mask, size_t *shape);

/**
 * Number of foreground voxels.
 *
 * # Safety
 * `mask` must be a live handle; `count` must be writable.
 */
enum HsStatus hs_mask_count(const struct HsMask *mask, size_t *count);

/**
 * Copies the mask (0 or 1 per voxel) into `buffer`, which must hold
 * exactly as many bytes as the mask has voxels.
 *
 * # Safety
 * `mask` must be a live handle; `buffer` must hold `len` bytes.
 */
enum HsStatus hs_mask_copy_data(const struct HsMask *mask, uint8_t *buffer, size_t len);

/**
 * # Safety
 * `mask` must come from this library and not be used afterwards; null is
 * ignored.
 */
void hs_mask_free(struct HsMask *mask);

/**
 * Loads `sagittal.ckpt`, `coronal.ckpt` and `axial.ckpt` from `dir`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum HsStatus hs_ensemble_load(const char *dir, struct HsEnsemble **out);

/**
 * # Safety
 * `ensemble` must come from this library and not be used afterwards; null
 * is ignored.
 */
void hs_ensemble_free(struct HsEnsemble *ensemble);

/**
 * Segments `volume` and returns a mask on the volume's own grid.
 * `options` may be null for the defaults.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum HsStatus hs_predict(const struct HsEnsemble *ensemble,
                         const struct HsVolume *volume,
                         const struct HsPredictOptions *options,
                         struct HsMask **out);

/**
 * Dice, per-half Dice (halves split at `x/2` along `midline_axis`),
 * precision and recall of `pred` against `truth`.
 *
 * # Safety
 * Handles must be live; `scores` must be writable.
 */
enum HsStatus hs_evaluate(const struct HsMask *pred,
                          const struct HsMask *truth,
                          size_t midline_axis,
                          struct HsScores *scores);

/**
 * Dice coefficient of two masks; two empty masks score 1.
 *
 * # Safety
 * Handles must be live; `dice` must be writable.
 */
enum HsStatus hs_dice(const struct HsMask *a, const struct HsMask *b, double *dice);

/**
 * Number of connected foreground components.
 *
 * # Safety
 * `mask` must be a live handle; `count` must be writable.
 */
enum HsStatus hs_count_components(const struct HsMask *mask, uint32_t connectivity_, size_t *count);

/**
 * New mask holding only the `keep` largest components of `mask`.
 *
 * # Safety
 * `mask` must be a live handle; `out` must be writable.
 */
enum HsStatus hs_keep_largest(const struct HsMask *mask,
                              size_t keep,
                              uint32_t connectivity_,
                              struct HsMask **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HIPSEG_H */
