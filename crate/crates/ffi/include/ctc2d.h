/* C interface to the ctc2d lattice core.
 *
 * Maintained by hand against crates/ffi/src/lib.rs; the smoke tests exercise
 * every declaration below through the compiled library.
 *
 * Conventions:
 *  - probability, logit, and gradient buffers are dense h*w*q arrays in
 *    row-major (i, j, k) order;
 *  - label classes are uint32_t in [1, q); class 0 is the blank and never
 *    appears in a target;
 *  - every function returns a CTC2D_* status code and writes results through
 *    out-pointers; buffers are caller-owned;
 *  - the only library-owned allocation is the grid handle, released with
 *    ctc2d_grid_free().
 */

#ifndef CTC2D_H
#define CTC2D_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

/* Opaque probability grid. */
typedef struct ctc2d_grid ctc2d_grid;

/* Status codes. */
enum {
    CTC2D_OK = 0,
    /* A required pointer argument was null. */
    CTC2D_NULL_ARGUMENT = 1,
    /* An argument failed validation (shape, range, label class, ...). */
    CTC2D_INVALID_ARGUMENT = 2,
    /* A caller buffer cannot hold the result; counts were still written. */
    CTC2D_BUFFER_TOO_SMALL = 3,
    /* Every path for some target has zero probability. */
    CTC2D_NO_MASS = 4,
    /* A non-finite value appeared where a finite one was required. */
    CTC2D_NUMERIC = 5,
    /* Internal invariant failure (a library bug, not a caller error). */
    CTC2D_INTERNAL = 6
};

/* Reading directions for ctc2d_decode(). */
enum {
    CTC2D_STRATEGY_ROWS = 0,
    CTC2D_STRATEGY_COLUMNS = 1,
    CTC2D_STRATEGY_ROWS_AND_COLUMNS = 2,
    CTC2D_STRATEGY_MERGED_ROWS = 3
};

/* Loss variants. */
enum {
    CTC2D_LOSS_NEG_LOG_MEAN_PROB = 0,
    CTC2D_LOSS_SUM_NEG_LOG_PROBS = 1
};

/* Library version as a static NUL-terminated string. */
const char *ctc2d_version(void);

/* Static description of a status code; unknown codes get a placeholder. */
const char *ctc2d_status_message(int32_t status);

/* Builds a grid from probs_len == h*w*q per-class probabilities. Entries
 * must be finite and non-negative; cells need not sum exactly to one
 * (gradients treat entries as free variables). On success *out receives a
 * handle owned by the caller. */
int32_t ctc2d_grid_new(size_t h, size_t w, size_t q, const double *probs,
                       size_t probs_len, ctc2d_grid **out);

/* Builds a grid by applying a per-cell softmax to raw logits; otherwise
 * identical to ctc2d_grid_new(). */
int32_t ctc2d_grid_from_logits(size_t h, size_t w, size_t q,
                               const double *logits, size_t logits_len,
                               ctc2d_grid **out);

/* Releases a grid handle; null is a no-op. */
void ctc2d_grid_free(ctc2d_grid *grid);

/* Reports the dimensions of a grid. */
int32_t ctc2d_grid_dims(const ctc2d_grid *grid, size_t *h, size_t *w,
                        size_t *q);

/* Log-probability of one label sequence under the lattice with move weights
 * (lambda1, lambda2). labels may be null when len == 0: that scores the
 * all-blank sequence. */
int32_t ctc2d_sequence_log_prob(const ctc2d_grid *grid, const uint32_t *labels,
                                size_t len, double lambda1, double lambda2,
                                double *out_log_prob);

/* Loss of a target set. Sequences arrive flattened: lens holds
 * num_sequences lengths, labels_flat their concatenated classes (each
 * sequence non-empty). out_per_sequence may be null; when given it receives
 * num_sequences log-probabilities. */
int32_t ctc2d_set_loss(const ctc2d_grid *grid, const uint32_t *labels_flat,
                       const size_t *lens, size_t num_sequences,
                       double lambda1, double lambda2, int32_t mode,
                       double *out_loss, double *out_per_sequence);

/* Loss plus its gradient. out_grad_probs (entries as free variables) and
 * out_grad_logits (through the per-cell softmax) may each be null; when
 * given they receive h*w*q entries. */
int32_t ctc2d_loss_gradient(const ctc2d_grid *grid,
                            const uint32_t *labels_flat, const size_t *lens,
                            size_t num_sequences, double lambda1,
                            double lambda2, int32_t mode, double *out_loss,
                            double *out_grad_probs, double *out_grad_logits);

/* Greedy argmax decode under a CTC2D_STRATEGY_* reading. Decoded sequences
 * come back flattened: out_seq_lens receives one length per sequence and
 * out_classes their concatenated classes. The required sizes are always
 * written to *out_num_sequences and *out_total_classes, so a first call with
 * zero capacities sizes the buffers for a second. */
int32_t ctc2d_decode(const ctc2d_grid *grid, int32_t strategy,
                     uint32_t *out_classes, size_t classes_cap,
                     size_t *out_seq_lens, size_t seq_lens_cap,
                     size_t *out_num_sequences, size_t *out_total_classes);

#ifdef __cplusplus
}
#endif

#endif /* CTC2D_H */
