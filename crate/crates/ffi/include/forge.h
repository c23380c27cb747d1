/* C ABI for the forge numerical kernels.
 *
 * Mirrors crates/ffi/src/lib.rs; keep the two in sync (the Rust test
 * suite checks that every exported symbol appears here).
 *
 * Conventions:
 *   - fallible functions return a forge_status and write results through
 *     out-pointers;
 *   - feature sets are row-major double matrices: count vectors of dim
 *     doubles each;
 *   - scorer tensors are channel-major float planes: channels blocks of
 *     height*width values, row-major within a plane; masks are one
 *     height*width plane with values in [0, 1].
 */

#ifndef FORGE_H
#define FORGE_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum forge_status {
    FORGE_STATUS_OK = 0,
    FORGE_STATUS_NULL_POINTER = 1,
    FORGE_STATUS_INVALID_ARGUMENT = 2,
    FORGE_STATUS_ZERO_VECTOR = 3,
    FORGE_STATUS_DIMENSION_MISMATCH = 4,
    FORGE_STATUS_EMPTY_REGION = 5,
    FORGE_STATUS_INSUFFICIENT_CHANNELS = 6,
} forge_status;

/* Opaque accumulator of per-channel forgery-awareness scores. */
typedef struct ForgeAffsScorer ForgeAffsScorer;

/* Static version string; do not free. */
const char *forge_version(void);

/* Binary cross-entropy of prediction in (0,1) against label 0 or 1.
 * Predictions are clamped to [1e-7, 1-1e-7]. */
forge_status forge_bce(double prediction, int label, double *out);

/* lambda1*bce + lambda2*l1 + lambda3*l2. */
forge_status forge_total_loss(double bce, double l1, double l2,
                              double lambda1, double lambda2,
                              double lambda3, double *out);

/* Cosine-aggregate similarity: the double sum of dot products of
 * direction-normalized vectors. f1 holds n1 vectors of dim doubles, f2
 * holds n2. Fails with FORGE_STATUS_ZERO_VECTOR when a vector norm falls
 * below 1e-12. */
forge_status forge_delta(const double *f1, size_t n1,
                         const double *f2, size_t n2,
                         size_t dim, double *out);

/* Patch-level contrastive term from per-sample similarity aggregates:
 * -log( sum_real e^(d/tau) / (sum_real e^(d/tau) + sum_fake e^(d/tau)) ),
 * computed with log-sum-exp stabilization. tau must be positive. */
forge_status forge_pcr_from_deltas(const double *real_deltas, size_t n_real,
                                   const double *fake_deltas, size_t n_fake,
                                   double tau, double *out);

/* Image-level contrastive term: out-out similarities in the numerator,
 * in-in similarities joining the denominator. */
forge_status forge_icr_from_deltas(const double *out_sims, size_t n_out,
                                   const double *in_sims, size_t n_in,
                                   double tau, double *out);

/* Create a scorer for channel-major tensors of the given shape. Returns
 * NULL if any dimension is zero. */
ForgeAffsScorer *forge_affs_scorer_new(size_t width, size_t height,
                                       size_t channels);

/* Accumulate one (real, fake, mask) triple. real and fake hold
 * channels*height*width floats; mask holds height*width floats. */
forge_status forge_affs_scorer_add_sample(ForgeAffsScorer *scorer,
                                          const float *real,
                                          const float *fake,
                                          const float *mask);

/* Mean per-channel scores so far; out must hold len >= channels doubles.
 * Fails with FORGE_STATUS_EMPTY_REGION before any sample was added. */
forge_status forge_affs_scorer_scores(const ForgeAffsScorer *scorer,
                                      double *out, size_t len);

/* Select the budget best channels (lowest mean score, ties toward the
 * lower index). out_indices must hold budget entries; out_scores may be
 * NULL or hold budget doubles aligned with out_indices. */
forge_status forge_affs_scorer_select(const ForgeAffsScorer *scorer,
                                      size_t budget, size_t *out_indices,
                                      double *out_scores);

/* Release a scorer; NULL is ignored. */
void forge_affs_scorer_free(ForgeAffsScorer *scorer);

#ifdef __cplusplus
}
#endif

#endif /* FORGE_H */
