#ifndef CNFM_H
#define CNFM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every fallible function.
typedef enum CnfmStatus {
  CNFM_STATUS_OK = 0,
  CNFM_STATUS_NULL_POINTER = 1,
  CNFM_STATUS_INVALID_ARGUMENT = 2,
  CNFM_STATUS_IO = 3,
  CNFM_STATUS_FORMAT = 4,
  CNFM_STATUS_NUMERIC = 5,
  CNFM_STATUS_UNSUPPORTED = 6,
  CNFM_STATUS_PANIC = 7,
} CnfmStatus;

// A loaded model: vector field, prior and training metadata.
typedef struct CnfmModel CnfmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *cnfm_version(void);

// Message for the last failed call on this thread (empty if none).
// The pointer stays valid until the next failing call on the same thread.
const char *cnfm_last_error_message(void);

// Load a checkpoint (and its `.manifest`, if present) into a new handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum CnfmStatus cnfm_model_load(const char *path, struct CnfmModel **out);

// Release a handle. Null is ignored.
//
// # Safety
// `model` must come from [`cnfm_model_load`] and not be used afterwards.
void cnfm_model_free(struct CnfmModel *model);

// Ambient dimension of the model's manifold, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t cnfm_model_ambient_dim(const struct CnfmModel *model);

// Copy the manifold description (e.g. `R^3 x S^1`) into `buf`, NUL-terminated.
// `needed` (if non-null) receives the buffer size required, including the NUL.
//
// # Safety
// `buf` must hold `len` bytes; `model` must be a live handle.
enum CnfmStatus cnfm_model_manifold(const struct CnfmModel *model,
                                    char *buf,
                                    size_t len,
                                    size_t *needed);

// `v(t, x)` into `out` (length `dim`).
//
// # Safety
// `x` and `out` must hold `dim` doubles.
enum CnfmStatus cnfm_model_eval(const struct CnfmModel *model,
                                double t,
                                const double *x,
                                size_t dim,
                                double *out);

// Exact divergence `div v(t, x)`.
//
// # Safety
// `x` must hold `dim` doubles; `out` must be valid.
enum CnfmStatus cnfm_model_divergence(const struct CnfmModel *model,
                                      double t,
                                      const double *x,
                                      size_t dim,
                                      double *out);

// `log q_1` at `n` points stored row-major in `xs` (`n * dim` doubles).
// `solver` is `rk4:N` or `dopri5:RTOL:ATOL`; null selects `dopri5:1e-6:1e-8`.
//
// # Safety
// `xs` must hold `n * dim` doubles and `out` `n` doubles.
enum CnfmStatus cnfm_model_log_likelihood(const struct CnfmModel *model,
                                          const double *xs,
                                          size_t n,
                                          size_t dim,
                                          const char *solver,
                                          double *out);

// Draw `n` samples into `out` (`n * dim` doubles, row-major).
//
// # Safety
// `out` must hold `n * dim` doubles.
enum CnfmStatus cnfm_model_sample(const struct CnfmModel *model,
                                  size_t n,
                                  uint64_t seed,
                                  const char *solver,
                                  double *out,
                                  size_t dim);

// Log volume of a manifold given as text, e.g. `S^2` or `S^1 x S^1`.
//
// # Safety
// `manifold` must be NUL-terminated; `out` must be valid.
enum CnfmStatus cnfm_manifold_log_volume(const char *manifold, double *out);

// Log normalizing constant of the von Mises-Fisher density on `S^(p-1)`.
//
// # Safety
// `out` must be valid.
enum CnfmStatus cnfm_log_norm_const_vmf(size_t p, double kappa, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CNFM_H */
