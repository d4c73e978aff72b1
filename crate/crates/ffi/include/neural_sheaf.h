#ifndef NEURAL_SHEAF_H
#define NEURAL_SHEAF_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum NsStatus {
  NS_STATUS_OK = 0,
  NS_STATUS_NULL_POINTER = 1,
  NS_STATUS_INVALID_ARGUMENT = 2,
  NS_STATUS_DIMENSION = 3,
  NS_STATUS_INVALID_MODEL = 4,
  NS_STATUS_DIVERGED = 5,
  NS_STATUS_NOT_CONVERGED = 6,
  NS_STATUS_IO = 7,
  NS_STATUS_INTERNAL = 8,
} NsStatus;

/**
 * Opaque network handle.
 */
typedef struct NsModel NsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Parse a model from its JSON text. On success `*out` owns a handle that
 * must be released with [`ns_model_free`].
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum NsStatus ns_model_from_json(const char *json, struct NsModel **out);

/**
 * Load a model JSON file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum NsStatus ns_model_load(const char *path, struct NsModel **out);

/**
 * Release a handle; null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void ns_model_free(struct NsModel *model);

/**
 * Input and output widths.
 *
 * # Safety
 * All pointers must be valid.
 */
enum NsStatus ns_model_dims(const struct NsModel *model, size_t *input_dim, size_t *output_dim);

/**
 * Forward pass `ŷ = φ(z⁽ᵏ⁺¹⁾)`.
 *
 * # Safety
 * `x` must hold `nx` values and `y` room for `ny`.
 */
enum NsStatus ns_forward(const struct NsModel *model,
                         const double *x,
                         size_t nx,
                         double *y,
                         size_t ny);

/**
 * Diffuse from a zero cochain until the velocity sup-norm drops below
 * `tol`; writes the equilibrium output and, if `steps` is non-null, the
 * number of steps. Returns `NotConverged` (with the last output written)
 * when `max_steps` runs out.
 *
 * # Safety
 * `x` must hold `nx` values, `y` room for `ny`; `steps` may be null.
 */
enum NsStatus ns_converge(const struct NsModel *model,
                          const double *x,
                          size_t nx,
                          double dt,
                          size_t max_steps,
                          double tol,
                          double *y,
                          size_t ny,
                          size_t *steps);

/**
 * `det δ_Ω` at the forward-pass activation pattern of `x` (always 1).
 *
 * # Safety
 * `x` must hold `nx` values and `det` be valid.
 */
enum NsStatus ns_unit_determinant(const struct NsModel *model,
                                  const double *x,
                                  size_t nx,
                                  double *det);

/**
 * Smallest and largest eigenvalue of the restricted Laplacian at the
 * forward-pass pattern of `x`. `lambda_max` may be null.
 *
 * # Safety
 * `x` must hold `nx` values and `lambda1` be valid.
 */
enum NsStatus ns_spectral_gap(const struct NsModel *model,
                              const double *x,
                              size_t nx,
                              double *lambda1,
                              double *lambda_max);

/**
 * Copy the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `len > 0`). Returns the full message length
 * plus one, so a caller can size the buffer with a null `buf`.
 *
 * # Safety
 * `buf` must have room for `len` bytes or be null.
 */
size_t ns_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ns_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NEURAL_SHEAF_H */
