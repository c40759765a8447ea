#ifndef DOICR_H
#define DOICR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum DoicrStatus {
  DoicrStatus_Ok = 0,
  /**
   * A required pointer argument was null.
   */
  DoicrStatus_NullArgument = 1,
  /**
   * Arguments were structurally valid but semantically wrong (unknown
   * method name, shape mismatch, out-of-range level).
   */
  DoicrStatus_InvalidArgument = 2,
  /**
   * Training or calibration failed (diverged, not enough data).
   */
  DoicrStatus_TrainingError = 3,
  /**
   * Reading or writing a file failed.
   */
  DoicrStatus_IoError = 4,
  /**
   * A panic was caught at the boundary; the handle state is unchanged
   * but the operation did not complete.
   */
  DoicrStatus_Panic = 5,
} DoicrStatus;

/**
 * Opaque dataset handle.
 */
typedef struct DoicrDataset DoicrDataset;

/**
 * Opaque model handle.
 */
typedef struct DoicrModel DoicrModel;

/**
 * Coverage and width of a model on a test set, in the data's original
 * units.
 */
typedef struct DoicrMetrics {
  /**
   * Fraction of targets inside their interval.
   */
  double picp;
  /**
   * Mean interval width; infinite when the intervals are unbounded.
   */
  double mpiw;
  /**
   * Number of test rows.
   */
  uintptr_t n;
  /**
   * True when calibration could not produce a finite quantile.
   */
  bool unbounded;
} DoicrMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the calling thread's most recent failure, or null if none.
 * The pointer stays valid until the next failing call on this thread.
 */
const char *doicr_last_error(void);

/**
 * Library version as a static string.
 */
const char *doicr_version(void);

/**
 * Builds a dataset from a row-major `rows x cols` feature array and a
 * target array of length `rows`. The data is copied.
 *
 * # Safety
 * `x` must point to `rows * cols` doubles and `y` to `rows` doubles.
 */
enum DoicrStatus doicr_dataset_from_arrays(const double *x,
                                           uintptr_t rows,
                                           uintptr_t cols,
                                           const double *y,
                                           struct DoicrDataset **out);

/**
 * Draws the built-in heteroscedastic synthetic dataset.
 *
 * # Safety
 * `out` must be a valid pointer to receive the handle.
 */
enum DoicrStatus doicr_dataset_synth(uintptr_t n,
                                     uintptr_t dims,
                                     uint64_t seed,
                                     struct DoicrDataset **out);

/**
 * Number of rows, or 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or a live handle from this library.
 */
uintptr_t doicr_dataset_rows(const struct DoicrDataset *dataset);

/**
 * Releases a dataset handle. Null is ignored.
 *
 * # Safety
 * `dataset` must be null or a live handle; it is dead afterwards.
 */
void doicr_dataset_free(struct DoicrDataset *dataset);

/**
 * Trains `method` ("doicr", "scpo", "qdsoft", "traditional" or the alias
 * "icp") on the dataset at the given confidence level and seed, running
 * the full split/standardize/train/calibrate pipeline. `epochs` of 0 uses
 * the default (1000).
 *
 * # Safety
 * `dataset` must be a live handle, `method` a NUL-terminated string and
 * `out` a valid pointer to receive the handle.
 */
enum DoicrStatus doicr_train(const struct DoicrDataset *dataset,
                             const char *method,
                             double confidence_level,
                             uint64_t seed,
                             uintptr_t epochs,
                             struct DoicrModel **out);

/**
 * Predicts interval bounds for a row-major `rows x cols` feature array in
 * the data's original units, filling `lower` and `upper` (each of length
 * `rows`). Unbounded intervals come out as infinities.
 *
 * # Safety
 * `model` must be a live handle; `x` must point to `rows * cols` doubles;
 * `lower` and `upper` must each have room for `rows` doubles.
 */
enum DoicrStatus doicr_model_predict(const struct DoicrModel *model,
                                     const double *x,
                                     uintptr_t rows,
                                     uintptr_t cols,
                                     double *lower,
                                     double *upper);

/**
 * Scores the model on a dataset, writing coverage and mean width (in
 * original units) to `out`.
 *
 * # Safety
 * `model` and `test` must be live handles and `out` a valid pointer.
 */
enum DoicrStatus doicr_model_evaluate(const struct DoicrModel *model,
                                      const struct DoicrDataset *test,
                                      struct DoicrMetrics *out);

/**
 * Writes the model as JSON to `path`.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum DoicrStatus doicr_model_save(const struct DoicrModel *model, const char *path);

/**
 * Loads a model previously written by [`doicr_model_save`], or a bare
 * training bundle such as the CLI's `model.json`. A bare bundle carries no
 * conformal quantile: direct-bounds models predict normally, scale-family
 * models come back unbounded.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DoicrStatus doicr_model_load(const char *path, struct DoicrModel **out);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a live handle; it is dead afterwards.
 */
void doicr_model_free(struct DoicrModel *model);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* DOICR_H */
