#ifndef FIXELFIT_H
#define FIXELFIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes. Values 2, 3 and 4 match the command-line exit codes.
typedef enum FfStatus {
  FF_STATUS_OK = 0,
  // A required pointer argument was null.
  FF_STATUS_NULL_POINTER = 1,
  FF_STATUS_CONFIG = 2,
  // Invalid input data, file or shape mismatch.
  FF_STATUS_DATA = 3,
  // Divergence, lack of progress or a non-finite value.
  FF_STATUS_NUMERIC = 4,
  FF_STATUS_IO = 5,
  // A string argument was not valid UTF-8.
  FF_STATUS_UTF8 = 6,
  // An output buffer has the wrong length.
  FF_STATUS_BUFFER_SIZE = 7,
  FF_STATUS_PANIC = 8,
} FfStatus;

// Per-voxel maps that can be copied out of a fit.
typedef enum FfMap {
  // `n_voxels` values.
  FF_MAP_S0 = 0,
  // `n_voxels * (k + 3)` values ordered CSF, GM, WM1..K, restricted.
  FF_MAP_FRACTIONS = 1,
  // `n_voxels * k * 3` unit vectors.
  FF_MAP_DIRECTIONS = 2,
  // `n_voxels` values.
  FF_MAP_F_INTRA = 3,
  // `n_voxels` values, 1 inside the mask and 0 outside.
  FF_MAP_MASK = 4,
  // Per-measurement log-scale, `n_measurements` values.
  FF_MAP_ALPHA = 5,
  // Per-measurement offset, `n_measurements` values.
  FF_MAP_BETA = 6,
  // 8x8x8 log-domain bias control points.
  FF_MAP_BIAS_GRID = 7,
} FfMap;

// Opaque run configuration.
typedef struct FfConfig FfConfig;

// Opaque fit result.
typedef struct FfFit FfFit;

// Opaque gradient table.
typedef struct FfScheme FfScheme;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next library call on the same thread.
const char *ff_last_error(void);

// Library version as a static string.
const char *ff_version(void);

// Frees a string returned by the library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void ff_string_free(char *s);

// `ln I0(x)` for `x >= 0`.
//
// # Safety
// `out` must be a valid pointer.
enum FfStatus ff_log_i0(double x, double *out);

// Builds a gradient table from `n` b-values and `n` row-major direction
// triples. Entries with b below `b0_threshold` are treated as b0.
//
// # Safety
// `b_values` must hold `n` values, `directions` `3 * n`, and `out` must be
// a valid pointer.
enum FfStatus ff_scheme_new(const double *b_values,
                            const double *directions,
                            size_t n,
                            double b0_threshold,
                            struct FfScheme **out);

// Reads an FSL-style `.bval` / `.bvec` pair.
//
// # Safety
// Paths must be nul-terminated strings and `out` a valid pointer.
enum FfStatus ff_scheme_read(const char *bval_path, const char *bvec_path, struct FfScheme **out);

// Number of measurements, or 0 for a null handle.
//
// # Safety
// `scheme` must be null or a live handle.
size_t ff_scheme_len(const struct FfScheme *scheme);

// # Safety
// `scheme` must be null or a live handle, not used afterwards.
void ff_scheme_free(struct FfScheme *scheme);

// Default configuration.
//
// # Safety
// `out` must be a valid pointer.
enum FfStatus ff_config_default(struct FfConfig **out);

// Parses a JSON configuration; missing fields take defaults and unknown
// keys are rejected.
//
// # Safety
// `json` must be a nul-terminated string and `out` a valid pointer.
enum FfStatus ff_config_from_json(const char *json, struct FfConfig **out);

// Fully resolved configuration as JSON. Free with [`ff_string_free`].
//
// # Safety
// `config` must be a live handle and `out` a valid pointer.
enum FfStatus ff_config_to_json(const struct FfConfig *config, char **out);

// # Safety
// `config` must be null or a live handle, not used afterwards.
void ff_config_free(struct FfConfig *config);

// Fits raw (not b0-normalized) signals.
//
// `data` holds `dims[0] * dims[1] * dims[2]` voxels with x fastest, each
// with `ff_scheme_len(scheme)` contiguous measurements. `mask` is null (all
// voxels) or one byte per voxel, nonzero meaning inside.
//
// # Safety
// Buffers must have the sizes above; handles must be live and `out` valid.
enum FfStatus ff_fit(const struct FfScheme *scheme,
                     const struct FfConfig *config,
                     const double *data,
                     const size_t *dims,
                     const uint8_t *mask,
                     struct FfFit **out);

// Fiber slots per voxel, or 0 for a null handle.
//
// # Safety
// `fit` must be null or a live handle.
size_t ff_fit_k(const struct FfFit *fit);

// Voxel count, or 0 for a null handle.
//
// # Safety
// `fit` must be null or a live handle.
size_t ff_fit_n_voxels(const struct FfFit *fit);

// Fitted noise level.
//
// # Safety
// `fit` must be a live handle and `out` a valid pointer.
enum FfStatus ff_fit_sigma(const struct FfFit *fit, double *out);

// Number of values in `map`, or 0 for a null handle.
//
// # Safety
// `fit` must be null or a live handle.
size_t ff_fit_map_len(const struct FfFit *fit, enum FfMap map);

// Copies `map` into `out`, whose length `len` must equal
// [`ff_fit_map_len`].
//
// # Safety
// `fit` must be a live handle and `out` must hold `len` values.
enum FfStatus ff_fit_copy_map(const struct FfFit *fit, enum FfMap map, double *out, size_t len);

// Per-slab loss traces and timings as JSON. Free with [`ff_string_free`].
//
// # Safety
// `fit` must be a live handle and `out` a valid pointer.
enum FfStatus ff_fit_report_json(const struct FfFit *fit, char **out);

// # Safety
// `fit` must be null or a live handle, not used afterwards.
void ff_fit_free(struct FfFit *fit);

// Writes the synthetic benchmark dataset described by `config` into
// `out_dir`.
//
// # Safety
// `config` must be a live handle and `out_dir` a nul-terminated string.
enum FfStatus ff_simulate(const struct FfConfig *config, const char *out_dir);

// Finite-difference gradient check in both data modes with `probes` probes
// per parameter group. Stores the largest relative discrepancy in
// `max_discrepancy` and the total probe count in `total_probes` (either may
// be null).
//
// # Safety
// `config` must be a live handle; non-null outputs must be valid.
enum FfStatus ff_check_grad(const struct FfConfig *config,
                            size_t probes,
                            uint64_t seed,
                            double *max_discrepancy,
                            size_t *total_probes);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FIXELFIT_H */
