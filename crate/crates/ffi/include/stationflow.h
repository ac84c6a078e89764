#ifndef STATIONFLOW_H
#define STATIONFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. Nonzero codes 2 to 6 match the command-line exit codes.
typedef enum SfStatus {
  SF_STATUS_OK = 0,
  // Null pointer, bad length or out-of-range index.
  SF_STATUS_INVALID_ARGUMENT = 1,
  SF_STATUS_SCHEMA = 2,
  SF_STATUS_DATA = 3,
  SF_STATUS_DIVERGENCE = 4,
  SF_STATUS_CONFIG = 5,
  SF_STATUS_IO = 6,
  // A Rust panic was caught at the boundary.
  SF_STATUS_INTERNAL = 7,
} SfStatus;

// A loaded model checkpoint.
typedef struct SfCheckpoint SfCheckpoint;

// A loaded hourly flow series.
typedef struct SfFlows SfFlows;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread. Never null; empty when
// no call has failed. Valid until the next failing call on this thread.
const char *sf_last_error(void);

// Library version as a static NUL-terminated string.
const char *sf_version(void);

// Great-circle distance in meters between two coordinates in degrees.
double sf_haversine(double lat1, double lon1, double lat2, double lon2);

// Pearson correlation of two series of length `n`; 0 for a constant series.
//
// # Safety
// `x` and `y` must point to `n` readable values and `out` to one writable
// value.
enum SfStatus sf_pearson(const double *x, const double *y, uintptr_t n, double *out);

// Writes `D⁻¹A + I` of the row-major `n × n` matrix `adjacency` into `out`.
//
// # Safety
// `adjacency` must point to `n·n` readable values and `out` to `n·n`
// writable values; they may not overlap.
enum SfStatus sf_normalize_adjacency(const double *adjacency, uintptr_t n, double *out);

// Interval `point ± z·√(σ₁² + σ₂²)` with the lower bound floored at zero.
//
// # Safety
// `lo` and `hi` must each point to one writable value.
enum SfStatus sf_confidence_interval(double point,
                                     double sigma_model,
                                     double sigma_noise,
                                     double alpha,
                                     double *lo,
                                     double *hi);

// Loads a checkpoint file. On success `*out` owns a handle to release with
// [`sf_checkpoint_free`].
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum SfStatus sf_checkpoint_load(const char *path, struct SfCheckpoint **out);

// Releases a checkpoint handle. Null is ignored.
//
// # Safety
// `handle` must come from [`sf_checkpoint_load`] and not be used again.
void sf_checkpoint_free(struct SfCheckpoint *handle);

// Shape of the model: stations, history hours, flow channels and context
// features. Any output pointer may be null.
//
// # Safety
// `handle` must be a live checkpoint handle.
enum SfStatus sf_checkpoint_shape(const struct SfCheckpoint *handle,
                                  uintptr_t *stations,
                                  uintptr_t *history,
                                  uintptr_t *channels,
                                  uintptr_t *context_width);

// Deterministic forecast for the hour after a window.
//
// `history` holds `history × stations × channels` raw counts, oldest hour
// first, row-major; `context` holds the raw context features of the target
// hour. `out` receives `stations × channels` forecasts clamped at zero.
//
// # Safety
// Buffers must have the sizes above; `handle` must be live.
enum SfStatus sf_checkpoint_predict(const struct SfCheckpoint *handle,
                                    const double *history,
                                    const double *context,
                                    double *out);

// Forecast with intervals from `iterations` Monte Carlo dropout passes and
// the checkpoint's noise level. Inputs as for [`sf_checkpoint_predict`];
// `point`, `lo` and `hi` each receive `stations × channels` values.
//
// # Safety
// Buffers must have the sizes above; `handle` must be live.
enum SfStatus sf_checkpoint_predict_interval(const struct SfCheckpoint *handle,
                                             const double *history,
                                             const double *context,
                                             uintptr_t iterations,
                                             uint64_t seed,
                                             double alpha,
                                             double *point,
                                             double *lo,
                                             double *hi);

// Loads a flow blob written by the ingest stage. On success `*out` owns a
// handle to release with [`sf_flows_free`].
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum SfStatus sf_flows_load(const char *path, struct SfFlows **out);

// Releases a flow handle. Null is ignored.
//
// # Safety
// `handle` must come from [`sf_flows_load`] and not be used again.
void sf_flows_free(struct SfFlows *handle);

// Station and hour counts of a flow series. Either output may be null.
//
// # Safety
// `handle` must be a live flow handle.
enum SfStatus sf_flows_shape(const struct SfFlows *handle, uintptr_t *stations, uintptr_t *hours);

// Count for `hour`, `station` and `channel` (0 inflow, 1 outflow).
//
// # Safety
// `handle` must be a live flow handle and `out` writable.
enum SfStatus sf_flows_get(const struct SfFlows *handle,
                           uintptr_t hour,
                           uintptr_t station,
                           uint32_t channel,
                           uint32_t *out);

// Start of the first hour as seconds since the Unix epoch, reading the
// local wall-clock time as UTC.
//
// # Safety
// `handle` must be a live flow handle and `out` writable.
enum SfStatus sf_flows_start(const struct SfFlows *handle, int64_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STATIONFLOW_H */
