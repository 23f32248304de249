#ifndef PFEDPF_H
#define PFEDPF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum PfStatus {
  PF_STATUS_OK = 0,
  PF_STATUS_NULL_POINTER = 1,
  PF_STATUS_INVALID_ARGUMENT = 2,
  PF_STATUS_DIMENSION_MISMATCH = 3,
  PF_STATUS_NOT_POSITIVE_DEFINITE = 4,
  PF_STATUS_IO = 5,
  PF_STATUS_FORMAT = 6,
  PF_STATUS_PANIC = 7,
} PfStatus;

/**
 * Stack of radial flow layers.
 */
typedef struct PfFlow PfFlow;

/**
 * Gaussian posterior over flattened classifier parameters.
 */
typedef struct PfPosterior PfPosterior;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *pf_version(void);

/**
 * Message of the last failed call on this thread. Valid until the next
 * failing call on the same thread; empty if nothing failed yet.
 */
const char *pf_last_error(void);

/**
 * Builds a posterior from a mean of length `dim` and a row-major
 * `dim × dim` covariance.
 *
 * # Safety
 * `mean` and `covariance` must point to `dim` and `dim * dim` doubles.
 */
enum PfStatus pf_posterior_new(const double *mean,
                               const double *covariance,
                               size_t dim,
                               struct PfPosterior **out);

/**
 * Reads a posterior checkpoint. When the file carries a flow and `flow_out`
 * is non-null, a flow handle is stored there; otherwise `*flow_out` is set
 * to null.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PfStatus pf_posterior_load(const char *path_c,
                                struct PfPosterior **out,
                                struct PfFlow **flow_out);

/**
 * Writes a posterior checkpoint, with `flow` appended when non-null.
 *
 * # Safety
 * `posterior` must be a live handle; `flow` null or a live handle.
 */
enum PfStatus pf_posterior_save(const struct PfPosterior *posterior,
                                const struct PfFlow *flow,
                                double prior_precision,
                                const char *path_c);

/**
 * Dimension of the posterior, or 0 for a null handle.
 *
 * # Safety
 * `posterior` must be null or a live handle.
 */
size_t pf_posterior_dim(const struct PfPosterior *posterior);

/**
 * Copies the mean into `out` (`len` must equal the dimension).
 *
 * # Safety
 * `out` must point to `len` writable doubles.
 */
enum PfStatus pf_posterior_mean(const struct PfPosterior *posterior, double *out, size_t len);

/**
 * Copies the row-major covariance into `out` (`len` must be dim²).
 *
 * # Safety
 * `out` must point to `len` writable doubles.
 */
enum PfStatus pf_posterior_covariance(const struct PfPosterior *posterior, double *out, size_t len);

/**
 * # Safety
 * `posterior` must be null or a handle not yet freed.
 */
void pf_posterior_free(struct PfPosterior *posterior);

/**
 * Moment-matched Gaussian of the mixture `Σ wᵢ N(μᵢ, Σᵢ)`; weights must be
 * non-negative and sum to 1.
 *
 * # Safety
 * `posteriors` and `weights` must point to `count` entries.
 */
enum PfStatus pf_aggregate(const struct PfPosterior *const *posteriors,
                           const double *weights,
                           size_t count,
                           struct PfPosterior **out);

/**
 * Monte Carlo predictive for one feature vector of length `feature_dim`,
 * written to `probs` (length = class count). `flow` may be null. Draws come
 * from a stream fixed by `seed`.
 *
 * # Safety
 * Buffers must hold the stated lengths.
 */
enum PfStatus pf_predict(const struct PfPosterior *posterior,
                         const struct PfFlow *flow,
                         const double *features,
                         size_t feature_dim,
                         size_t samples,
                         uint64_t seed,
                         double *probs,
                         size_t class_count);

/**
 * Binary probit predictive `σ(f / √(1 + πs/8))`.
 */
double pf_probit(double f, double s);

/**
 * Builds a flow of `layers` radial layers in dimension `dim` from raw
 * parameters: `centres` is `layers × dim` row-major.
 *
 * # Safety
 * Buffers must hold the stated lengths.
 */
enum PfStatus pf_flow_new(const double *centres,
                          const double *alpha_raw,
                          const double *beta_raw,
                          size_t layers,
                          size_t dim,
                          struct PfFlow **out);

/**
 * Number of layers, or 0 for a null handle.
 *
 * # Safety
 * `flow` must be null or a live handle.
 */
size_t pf_flow_len(const struct PfFlow *flow);

/**
 * `y = T(x)` and `log|det ∂T/∂x|`.
 *
 * # Safety
 * `x` and `y` must hold `dim` doubles; `log_det` may be null.
 */
enum PfStatus pf_flow_forward(const struct PfFlow *flow,
                              const double *x,
                              size_t dim,
                              double *y,
                              double *log_det);

/**
 * `x = T⁻¹(y)`.
 *
 * # Safety
 * `y` and `x` must hold `dim` doubles.
 */
enum PfStatus pf_flow_inverse(const struct PfFlow *flow, const double *y, size_t dim, double *x);

/**
 * Log density at `phi` of the base posterior pushed through the flow.
 *
 * # Safety
 * `phi` must hold `dim` doubles and `out` be writable.
 */
enum PfStatus pf_flow_log_density(const struct PfFlow *flow,
                                  const struct PfPosterior *base,
                                  const double *phi,
                                  size_t dim,
                                  double *out);

/**
 * # Safety
 * `flow` must be null or a handle not yet freed.
 */
void pf_flow_free(struct PfFlow *flow);

/**
 * AUROC with OOD as the positive class; higher scores mean more OOD.
 *
 * # Safety
 * `id` and `ood` must hold `n_id` and `n_ood` doubles.
 */
enum PfStatus pf_auroc(const double *id, size_t n_id, const double *ood, size_t n_ood, double *out);

/**
 * AUPR with OOD as the positive class; higher scores mean more OOD.
 *
 * # Safety
 * As [`pf_auroc`].
 */
enum PfStatus pf_aupr(const double *id, size_t n_id, const double *ood, size_t n_ood, double *out);

/**
 * False-positive rate at 95% true-positive rate; higher scores mean more OOD.
 *
 * # Safety
 * As [`pf_auroc`].
 */
enum PfStatus pf_fpr95(const double *id, size_t n_id, const double *ood, size_t n_ood, double *out);

/**
 * Expected calibration error over `bins` equal-width bins for `n` rows of
 * `class_count` probabilities (row-major) and their labels.
 *
 * # Safety
 * `probs` must hold `n * class_count` doubles and `labels` `n` entries.
 */
enum PfStatus pf_ece(const double *probs,
                     const size_t *labels,
                     size_t n,
                     size_t class_count,
                     size_t bins,
                     double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PFEDPF_H */
