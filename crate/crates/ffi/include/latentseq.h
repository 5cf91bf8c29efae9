#ifndef LATENTSEQ_H
#define LATENTSEQ_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum LsStatus {
  LS_STATUS_OK = 0,
  LS_STATUS_NULL_POINTER = 1,
  LS_STATUS_INVALID_ARGUMENT = 2,
  LS_STATUS_SHAPE = 3,
  LS_STATUS_NON_FINITE = 4,
  LS_STATUS_UNDEFINED_POSTERIOR = 5,
  LS_STATUS_DECODE_FAILURE = 6,
  LS_STATUS_CHECKPOINT = 7,
  LS_STATUS_CONFIG = 8,
  LS_STATUS_IO = 9,
  LS_STATUS_JSON = 10,
  LS_STATUS_PANIC = 11,
} LsStatus;

/**
 * A loaded segmental data-to-text model.
 */
typedef struct LsSegModel LsSegModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Version string of the library, static storage.
 */
const char *ls_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *ls_last_error_message(void);

/**
 * Log-partition of a semi-Markov lattice with `m` tokens, segments up to
 * `l` tokens and `k1 = K+1` records. Tables are row-major:
 * `gen[m][l][k1]`, `trans[m][k1][k1]`, `init[k1]`, all log-probabilities.
 *
 * # Safety
 * Pointers must reference arrays of the stated sizes; `out` must be
 * writable.
 */
enum LsStatus ls_semimarkov_log_marginal(const double *gen,
                                         const double *trans,
                                         const double *init,
                                         size_t m,
                                         size_t l,
                                         size_t k1,
                                         double *out);

/**
 * Expected number of segments E[τ] under the lattice.
 *
 * # Safety
 * As [`ls_semimarkov_log_marginal`].
 */
enum LsStatus ls_semimarkov_expected_segments(const double *gen,
                                              const double *trans,
                                              const double *init,
                                              size_t m,
                                              size_t l,
                                              size_t k1,
                                              double *out);

/**
 * Posterior usage of every `gen` entry, written to `out_gen[m][l][k1]`.
 *
 * # Safety
 * As [`ls_semimarkov_log_marginal`]; `out_gen` must hold `m·l·k1` values.
 */
enum LsStatus ls_semimarkov_gen_marginals(const double *gen,
                                          const double *trans,
                                          const double *init,
                                          size_t m,
                                          size_t l,
                                          size_t k1,
                                          double *out_gen);

/**
 * Log-marginal of a first-order HMM with `t` steps and `k` states:
 * `init[k]`, `trans[t][k][k]` (`trans[s][i][j]` = log p(i | j)), `emit[t][k]`.
 *
 * # Safety
 * Pointers must reference arrays of the stated sizes; `out` must be
 * writable.
 */
enum LsStatus ls_hmm_log_marginal(const double *init,
                                  const double *trans,
                                  const double *emit,
                                  size_t t,
                                  size_t k,
                                  double *out);

/**
 * p(y) = p_gen·p_vocab[y] + (1 − p_gen)·Σᵢ attention[i]·[source_ids[i] = y].
 *
 * # Safety
 * See [`pointer_state`]; `out` must be writable.
 */
enum LsStatus ls_pointer_mixture(double p_gen,
                                 const double *attention,
                                 const size_t *source_ids,
                                 size_t n,
                                 const double *p_vocab,
                                 size_t v,
                                 size_t y,
                                 double *out);

/**
 * Posterior of generating `y` (`out_gen`) and of copying it from each
 * source position (`out_positions[n]`); they sum to 1.
 *
 * # Safety
 * See [`pointer_state`]; `out_gen` and `out_positions[n]` must be writable.
 */
enum LsStatus ls_pointer_posterior(double p_gen,
                                   const double *attention,
                                   const size_t *source_ids,
                                   size_t n,
                                   const double *p_vocab,
                                   size_t v,
                                   size_t y,
                                   double *out_gen,
                                   double *out_positions);

/**
 * Loads a checkpoint manifest (and its sibling tensor archive) into a new
 * handle stored in `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum LsStatus ls_segmodel_load(const char *path, struct LsSegModel **out);

/**
 * Releases a model handle; null is ignored.
 *
 * # Safety
 * `model` must come from [`ls_segmodel_load`] and not be used afterwards.
 */
void ls_segmodel_free(struct LsSegModel *model);

/**
 * Decodes the records `[[slot, value], …]` (JSON) with constrained beam
 * search and writes a JSON object `{tokens, segments: [[start, end,
 * record], …], score}` to `*out_json`, freed with [`ls_string_free`].
 *
 * # Safety
 * `model` must be a live handle, `records_json` a NUL-terminated string and
 * `out_json` writable.
 */
enum LsStatus ls_segmodel_decode(const struct LsSegModel *model,
                                 const char *records_json,
                                 size_t beam,
                                 char **out_json);

/**
 * Frees a string returned by this library; null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void ls_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LATENTSEQ_H */
