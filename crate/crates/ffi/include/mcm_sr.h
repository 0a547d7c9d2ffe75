#ifndef MCM_SR_H
#define MCM_SR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum McmStatus {
  MCM_STATUS_OK = 0,
  MCM_STATUS_NULL_POINTER = 1,
  MCM_STATUS_INVALID_ARGUMENT = 2,
  MCM_STATUS_SHAPE = 3,
  MCM_STATUS_UNKNOWN_METABOLITE = 4,
  MCM_STATUS_NOT_FOUND = 5,
  MCM_STATUS_LOAD = 6,
  MCM_STATUS_CHECKSUM = 7,
  MCM_STATUS_CONSISTENCY = 8,
  MCM_STATUS_IO = 9,
  MCM_STATUS_INTERNAL = 10,
  MCM_STATUS_PANIC = 11,
} McmStatus;

// A loaded model. Opaque to C callers.
typedef struct McmModel McmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Loads a checkpoint. On success `*out` receives a handle owned by the caller.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum McmStatus mcm_model_load(const char *path, struct McmModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must come from [`mcm_model_load`] and not be used afterwards.
void mcm_model_free(struct McmModel *model);

// Side length of the images the model works on, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t mcm_model_grid_size(const struct McmModel *model);

// Number of metabolite names accepted by [`mcm_super_resolve`].
size_t mcm_metabolite_count(void);

// Zero-fills `image` outside the central `n`x`n` k-space window.
//
// # Safety
// `image` and `out` must each hold `grid * grid` doubles.
enum McmStatus mcm_degrade(const double *image, size_t grid, uint32_t n, double *out);

// Super-resolves one acquisition.
//
// `lowres` is the zero-filled measurement, `t1` and `flair` the anatomical images, all
// `grid * grid` doubles on the model grid. The result goes to `out`; if `residual` is
// not null it receives the relative k-space deviation of the output from the measurement.
//
// # Safety
// All array pointers must hold `grid * grid` doubles and `metabolite` must be a
// NUL-terminated string.
enum McmStatus mcm_super_resolve(const struct McmModel *model,
                                 const double *lowres,
                                 const double *t1,
                                 const double *flair,
                                 size_t grid,
                                 uint32_t n,
                                 const char *metabolite,
                                 double lambda,
                                 double *out,
                                 double *residual);

// Message for the most recent failure on this thread, or null. Valid until the next call
// on the same thread.
const char *mcm_last_error(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MCM_SR_H */
