#ifndef FETALDBM_H
#define FETALDBM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum FdbmStatus {
  FDBM_STATUS_OK = 0,
  FDBM_STATUS_NULL_POINTER = 1,
  FDBM_STATUS_INVALID_UTF8 = 2,
  FDBM_STATUS_INVALID_INPUT = 3,
  FDBM_STATUS_IO = 4,
  FDBM_STATUS_GEOMETRY = 5,
  FDBM_STATUS_NUMERICAL = 6,
  FDBM_STATUS_PIPELINE = 7,
  FDBM_STATUS_BUFFER_TOO_SMALL = 8,
  FDBM_STATUS_PANIC = 9,
} FdbmStatus;

/**
 * Outcome of a subject run.
 */
typedef enum FdbmUnitStatus {
  FDBM_UNIT_STATUS_OK = 0,
  FDBM_UNIT_STATUS_FAILED = 1,
  FDBM_UNIT_STATUS_EXCLUDED = 2,
  FDBM_UNIT_STATUS_INCOMPLETE = 3,
} FdbmUnitStatus;

/**
 * Opaque dense deformation field.
 */
typedef struct FdbmField FdbmField;

/**
 * Opaque label map.
 */
typedef struct FdbmLabels FdbmLabels;

/**
 * Opaque scalar volume.
 */
typedef struct FdbmVolume FdbmVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *fdbm_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fdbm_version(void);

/**
 * Creates a volume on a grid centered at the world origin with identity
 * direction. `data` holds `dims[0]·dims[1]·dims[2]` values, x fastest.
 *
 * # Safety
 * `dims` and `spacing` point to 3 values, `data` to `len` values, `out` is writable.
 */
enum FdbmStatus fdbm_volume_new(const size_t *dims,
                                const double *spacing,
                                const float *data,
                                size_t len,
                                struct FdbmVolume **out);

/**
 * Reads a scalar NIfTI volume (.nii or .nii.gz).
 *
 * # Safety
 * `path` is a NUL-terminated string and `out` is writable.
 */
enum FdbmStatus fdbm_volume_read(const char *path, struct FdbmVolume **out);

/**
 * # Safety
 * `vol` is a live handle and `path` a NUL-terminated string.
 */
enum FdbmStatus fdbm_volume_write(const struct FdbmVolume *vol, const char *path);

/**
 * Releases a volume. NULL is ignored.
 *
 * # Safety
 * `vol` is NULL or a handle not yet freed.
 */
void fdbm_volume_free(struct FdbmVolume *vol);

/**
 * Writes the grid dimensions and spacing (mm) to 3-element arrays.
 *
 * # Safety
 * `vol` is a live handle; `dims` and `spacing` are NULL or point to 3 writable values.
 */
enum FdbmStatus fdbm_volume_geometry(const struct FdbmVolume *vol, size_t *dims, double *spacing);

/**
 * Copies the voxel values (x fastest) into `buf`, which must hold at least
 * as many values as the volume has voxels.
 *
 * # Safety
 * `vol` is a live handle and `buf` points to `len` writable values.
 */
enum FdbmStatus fdbm_volume_copy_data(const struct FdbmVolume *vol, float *buf, size_t len);

/**
 * Reads a label NIfTI file.
 *
 * # Safety
 * `path` is a NUL-terminated string and `out` is writable.
 */
enum FdbmStatus fdbm_labels_read(const char *path, struct FdbmLabels **out);

/**
 * # Safety
 * `labels` is NULL or a handle not yet freed.
 */
void fdbm_labels_free(struct FdbmLabels *labels);

/**
 * Volume (mm³) of the voxels carrying `label`.
 *
 * # Safety
 * `labels` is a live handle and `out` is writable.
 */
enum FdbmStatus fdbm_label_volume(const struct FdbmLabels *labels, uint16_t label, double *out);

/**
 * Daily growth (mm³/day) between two volumes measured at the given GAs (weeks).
 *
 * # Safety
 * `out` is writable.
 */
enum FdbmStatus fdbm_growth_rate(double v_pre,
                                 double v_post,
                                 double ga_pre,
                                 double ga_post,
                                 double *out);

/**
 * Reads a deformation field written by the pipeline.
 *
 * # Safety
 * `path` is a NUL-terminated string and `out` is writable.
 */
enum FdbmStatus fdbm_field_read(const char *path, struct FdbmField **out);

/**
 * # Safety
 * `field` is NULL or a handle not yet freed.
 */
void fdbm_field_free(struct FdbmField *field);

/**
 * Log-determinant of the field's Jacobian as a new volume. Non-positive
 * determinants are counted in `nonpositive` (may be NULL).
 *
 * # Safety
 * `field` is a live handle, `out` is writable, `nonpositive` is NULL or writable.
 */
enum FdbmStatus fdbm_jacobian_log_det(const struct FdbmField *field,
                                      struct FdbmVolume **out,
                                      size_t *nonpositive);

/**
 * Threshold-free cluster enhancement of a statistic map (6-connectivity).
 * `dh <= 0` selects max|map| / 100.
 *
 * # Safety
 * `map` is a live handle and `out` is writable.
 */
enum FdbmStatus fdbm_tfce(const struct FdbmVolume *map,
                          double e,
                          double h,
                          double dh,
                          struct FdbmVolume **out);

/**
 * Runs the subject flow for `subject_id` of the cohort table at `cohort_csv`.
 * `config` may be NULL for defaults. A failed subject is reported through
 * `unit_status` with `FDBM_STATUS_OK`; the returned status covers only
 * argument, configuration and I/O errors outside the stages.
 *
 * # Safety
 * String arguments are NUL-terminated (or NULL where allowed); `unit_status` is writable.
 */
enum FdbmStatus fdbm_run_subject(const char *config,
                                 const char *cohort_csv,
                                 const char *subject_id,
                                 const char *data_dir,
                                 const char *out_dir,
                                 enum FdbmUnitStatus *unit_status);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FETALDBM_H */
