#ifndef STAINSEG_H
#define STAINSEG_H

/* Generated with cbindgen:0.29.4 */

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum StainsegStatus {
  STAINSEG_STATUS_OK = 0,
  STAINSEG_STATUS_NULL_POINTER = 1,
  STAINSEG_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Stain estimation or normalization failed.
   */
  STAINSEG_STATUS_STAIN_FAILURE = 3,
  STAINSEG_STATUS_POSTPROCESS_FAILURE = 4,
  STAINSEG_STATUS_DIMENSION_MISMATCH = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  STAINSEG_STATUS_INTERNAL_ERROR = 99,
} StainsegStatus;

/**
 * 8-bit interleaved RGB image.
 */
typedef struct StainsegImage StainsegImage;

/**
 * Instance label map (0 = background).
 */
typedef struct StainsegLabelMap StainsegLabelMap;

/**
 * Reference stain profile.
 */
typedef struct StainsegProfile StainsegProfile;

typedef struct StainsegNormalizationParams {
  double io;
  double beta;
  double alpha;
  double sat_percentile;
} StainsegNormalizationParams;

typedef struct StainsegPostprocessParams {
  double prob_threshold;
  double gaussian_sigma;
  /**
   * Marker depth; a fraction of the distance range when `marker_h_relative`
   * is non-zero, distance units otherwise.
   */
  double marker_h;
  int32_t marker_h_relative;
  size_t min_instance_area;
  size_t opening_radius;
} StainsegPostprocessParams;

typedef struct StainsegMetrics {
  double dice;
  double aji;
  double pq;
  double dq;
  double sq;
  size_t tp;
  size_t fp;
  size_t fn_;
} StainsegMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *stainseg_last_error(void);

struct StainsegNormalizationParams stainseg_normalization_params_default(void);

struct StainsegPostprocessParams stainseg_postprocess_params_default(void);

/**
 * Copy `len = width * height * 3` bytes of interleaved RGB into a new image.
 *
 * # Safety
 * `data` must point to `len` readable bytes; `out` must be writable.
 */
enum StainsegStatus stainseg_image_new(size_t width,
                                       size_t height,
                                       const uint8_t *data,
                                       size_t len,
                                       struct StainsegImage **out);

/**
 * # Safety
 * `img` must be null or a handle from this library, freed at most once.
 */
void stainseg_image_free(struct StainsegImage *img);

/**
 * # Safety
 * `img` must be a valid handle.
 */
size_t stainseg_image_width(const struct StainsegImage *img);

/**
 * # Safety
 * `img` must be a valid handle.
 */
size_t stainseg_image_height(const struct StainsegImage *img);

/**
 * Copy the pixels into `buf`, which must hold exactly width * height * 3 bytes.
 *
 * # Safety
 * `img` must be a valid handle and `buf` must point to `len` writable bytes.
 */
enum StainsegStatus stainseg_image_copy_data(const struct StainsegImage *img,
                                             uint8_t *buf,
                                             size_t len);

/**
 * Estimate a reference profile from `img`. `params` may be null for defaults.
 *
 * # Safety
 * `img` must be a valid handle, `source_id` a NUL-terminated UTF-8 string,
 * `out` writable.
 */
enum StainsegStatus stainseg_profile_build(const struct StainsegImage *img,
                                           const char *source_id,
                                           const struct StainsegNormalizationParams *params,
                                           struct StainsegProfile **out);

/**
 * # Safety
 * `json` must be a NUL-terminated UTF-8 string and `out` writable.
 */
enum StainsegStatus stainseg_profile_from_json(const char *json, struct StainsegProfile **out);

/**
 * Serialize a profile. Release the string with [`stainseg_string_free`].
 *
 * # Safety
 * `profile` must be a valid handle and `out` writable.
 */
enum StainsegStatus stainseg_profile_to_json(const struct StainsegProfile *profile, char **out);

/**
 * # Safety
 * `s` must be null or a string returned by this library, freed at most once.
 */
void stainseg_string_free(char *s);

/**
 * # Safety
 * `profile` must be null or a handle from this library, freed at most once.
 */
void stainseg_profile_free(struct StainsegProfile *profile);

/**
 * Normalize `img` to the reference. `params` may be null for defaults.
 *
 * # Safety
 * Handles must be valid and `out` writable.
 */
enum StainsegStatus stainseg_normalize(const struct StainsegImage *img,
                                       const struct StainsegProfile *reference,
                                       const struct StainsegNormalizationParams *params,
                                       struct StainsegImage **out);

/**
 * Side of the square a `width` x `height` tile is padded to: 1024, or the
 * next multiple of 32 for larger tiles.
 */
size_t stainseg_auto_pad_side(size_t width, size_t height);

/**
 * Copy `width * height` labels into a new label map.
 *
 * # Safety
 * `labels` must point to `len` readable values; `out` must be writable.
 */
enum StainsegStatus stainseg_label_map_new(size_t width,
                                           size_t height,
                                           const uint32_t *labels,
                                           size_t len,
                                           struct StainsegLabelMap **out);

/**
 * # Safety
 * `map` must be null or a handle from this library, freed at most once.
 */
void stainseg_label_map_free(struct StainsegLabelMap *map);

/**
 * # Safety
 * `map` must be a valid handle.
 */
size_t stainseg_label_map_width(const struct StainsegLabelMap *map);

/**
 * # Safety
 * `map` must be a valid handle.
 */
size_t stainseg_label_map_height(const struct StainsegLabelMap *map);

/**
 * Number of distinct instances.
 *
 * # Safety
 * `map` must be a valid handle.
 */
size_t stainseg_label_map_count(const struct StainsegLabelMap *map);

/**
 * Copy the labels into `buf`, which must hold exactly width * height values.
 *
 * # Safety
 * `map` must be a valid handle and `buf` must point to `len` writable values.
 */
enum StainsegStatus stainseg_label_map_copy(const struct StainsegLabelMap *map,
                                            uint32_t *buf,
                                            size_t len);

/**
 * Instance segmentation from a probability and a distance map, each
 * `width * height` values. `params` may be null for defaults.
 *
 * # Safety
 * `prob` and `dist` must point to `width * height` readable values and
 * `out` must be writable.
 */
enum StainsegStatus stainseg_instances_from_maps(size_t width,
                                                 size_t height,
                                                 const float *prob,
                                                 const float *dist,
                                                 const struct StainsegPostprocessParams *params,
                                                 struct StainsegLabelMap **out);

/**
 * Dice, AJI and PQ of `pred` against `gt`.
 *
 * # Safety
 * Handles must be valid and `out` writable.
 */
enum StainsegStatus stainseg_evaluate(const struct StainsegLabelMap *gt,
                                      const struct StainsegLabelMap *pred,
                                      struct StainsegMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STAINSEG_H */
