#ifndef MOICA_FFI_H
#define MOICA_FFI_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible function.
typedef enum MoicaStatus {
  MOICA_STATUS_OK = 0,
  MOICA_STATUS_NULL_POINTER = 1,
  MOICA_STATUS_INVALID_ARGUMENT = 2,
  MOICA_STATUS_IO = 3,
  MOICA_STATUS_FORMAT = 4,
  MOICA_STATUS_SHAPE_MISMATCH = 5,
  MOICA_STATUS_NUMERICAL = 6,
  MOICA_STATUS_NO_WHITENING = 7,
  MOICA_STATUS_PANIC = 8,
} MoicaStatus;

// Opaque model handle.
typedef struct MoicaModel MoicaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *moica_version(void);

// Copies the calling thread's last error message into `buf` (truncated and
// always NUL-terminated when `len > 0`). Returns the full message length in
// bytes, excluding the terminator.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t moica_last_error(char *buf, size_t len);

// Loads a model file. On success `*out` receives a new handle.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum MoicaStatus moica_model_load(const char *path, struct MoicaModel **out);

// Parses a model from an in-memory model file image.
//
// # Safety
// `bytes` must point to `len` readable bytes; `out` must be writable.
enum MoicaStatus moica_model_from_bytes(const uint8_t *bytes, size_t len, struct MoicaModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void moica_model_free(struct MoicaModel *model);

// Model dimension M (the whitened dimension when whitening is stored).
// Returns 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t moica_model_dim(const struct MoicaModel *model);

// Number of mixture components K; 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t moica_model_n_components(const struct MoicaModel *model);

// Raw patch dimension D of the stored whitening; 0 without whitening.
//
// # Safety
// `model` must be null or a live handle.
size_t moica_model_input_dim(const struct MoicaModel *model);

// Patch side length implied by the stored whitening; 0 without whitening.
//
// # Safety
// `model` must be null or a live handle.
size_t moica_model_patch_size(const struct MoicaModel *model);

// Copies the K component priors into `out`.
//
// # Safety
// `out` must point to `len` writable doubles.
enum MoicaStatus moica_model_priors(const struct MoicaModel *model, double *out, size_t len);

// Copies the M×M mixing matrix of component `k` (column-major) into `out`.
//
// # Safety
// `out` must point to `len` writable doubles.
enum MoicaStatus moica_model_mixing(const struct MoicaModel *model,
                                    size_t k,
                                    double *out,
                                    size_t len);

// Total log-likelihood of `n` data columns of length M.
//
// # Safety
// `data` must point to `M·n` readable doubles; `out` must be writable.
enum MoicaStatus moica_model_loglik(const struct MoicaModel *model,
                                    const double *data,
                                    size_t n,
                                    double *out);

// Component posteriors of `n` data columns, written as a K×n column-major
// matrix (the K posteriors of each datum are contiguous).
//
// # Safety
// `data` must point to `M·n` readable doubles and `out` to `K·n` writable
// doubles.
enum MoicaStatus moica_model_posteriors(const struct MoicaModel *model,
                                        const double *data,
                                        size_t n,
                                        double *out);

// Whitens `n` raw patch columns of length D into `n` columns of length M.
//
// # Safety
// `data` must point to `D·n` readable doubles and `out` to `M·n` writable
// doubles.
enum MoicaStatus moica_model_whiten(const struct MoicaModel *model,
                                    const double *data,
                                    size_t n,
                                    double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOICA_FFI_H */
