#ifndef PHENOSFM_H
#define PHENOSFM_H

/* Generated by cbindgen from phenosfm-capi. Do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every ABI call.
 */
typedef enum ps_status {
  PS_OK = 0,
  /**
   * A value was out of its documented range.
   */
  PS_ERR_INVALID_ARGUMENT = 1,
  /**
   * A required pointer was null.
   */
  PS_ERR_NULL_POINTER = 2,
  /**
   * A string argument was not valid UTF-8.
   */
  PS_ERR_UTF8 = 3,
  /**
   * A configuration key or value was rejected.
   */
  PS_ERR_CONFIG = 4,
  /**
   * The batch ran but one or more frames failed.
   */
  PS_ERR_RUN = 5,
  /**
   * File input or output failed.
   */
  PS_ERR_IO = 6,
  /**
   * Unexpected internal failure.
   */
  PS_ERR_INTERNAL = 7,
} ps_status;

/**
 * Pipeline settings handle. Starts at the documented defaults.
 */
typedef struct ps_config ps_config;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *ps_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *ps_version(void);

/**
 * Sphere volume in cm3 from its radius in cm.
 */
enum ps_status ps_sphere_volume(double radius_cm, double *out_cm3);

/**
 * Sphere volume in cm3 from a measured circumference in cm.
 */
enum ps_status ps_volume_from_circumference(double c_cm, double *out_cm3);

/**
 * Single-leaf area in cm2 from the plant's leaf lengths, this leaf's
 * length, and the regression slope.
 */
enum ps_status ps_leaf_area(const double *lengths_cm,
                            size_t n_lengths,
                            double length_cm,
                            double coeff,
                            double *out_cm2);

/**
 * 100 minus the mean absolute percentage error of `detected` against
 * `truth`; both arrays have `n` entries.
 */
enum ps_status ps_mean_precision(const double *detected,
                                 const double *truth,
                                 size_t n,
                                 double *out_percent);

/**
 * Intersection over union of two run-length encoded masks sharing one
 * `width` x `height` grid. Runs alternate unset/set pixel counts in
 * row-major order, starting with unset.
 */
enum ps_status ps_mask_iou(const uint64_t *runs_a,
                           size_t n_runs_a,
                           const uint64_t *runs_b,
                           size_t n_runs_b,
                           size_t width,
                           size_t height,
                           double *out_iou);

/**
 * Allocate a settings handle; release it with `ps_config_free`.
 */
struct ps_config *ps_config_new(void);

/**
 * Set one key from its text form, with the same names, ranges, and
 * rejection rules as the configuration file.
 */
enum ps_status ps_config_set(struct ps_config *cfg, const char *key, const char *value);

/**
 * Release a settings handle. Null is a no-op.
 */
void ps_config_free(struct ps_config *cfg);

/**
 * Process the frame sequence matched by `frames_glob` with the mask
 * files matched by `masks_glob`, writing the measurement tables and
 * visualizations into `out_dir`. Outputs are still written when some
 * frames fail; the status then reports the failure.
 */
enum ps_status ps_run_pipeline(const struct ps_config *cfg,
                               const char *frames_glob,
                               const char *masks_glob,
                               const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PHENOSFM_H */
