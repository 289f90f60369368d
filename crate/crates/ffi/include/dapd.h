#ifndef DAPD_H
#define DAPD_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DapdStrategyKind {
  DAPD_STRATEGY_KIND_SEQUENTIAL = 0,
  DAPD_STRATEGY_KIND_TOPK = 1,
  DAPD_STRATEGY_KIND_CONF_THRESHOLD = 2,
  DAPD_STRATEGY_KIND_KL_STABILITY = 3,
  DAPD_STRATEGY_KIND_DAPD = 4,
} DapdStrategyKind;

typedef enum DapdCommitter {
  DAPD_COMMITTER_ARGMAX = 0,
  DAPD_COMMITTER_SAMPLE = 1,
} DapdCommitter;

/**
 * Result code of every fallible call.
 */
typedef enum DapdStatus {
  DAPD_STATUS_OK = 0,
  DAPD_STATUS_NULL_POINTER = 1,
  DAPD_STATUS_INVALID_ARGUMENT = 2,
  DAPD_STATUS_IO = 3,
  DAPD_STATUS_CHECKPOINT = 4,
  DAPD_STATUS_ZERO_SUPPORT = 5,
  DAPD_STATUS_INTERNAL = 6,
  DAPD_STATUS_PANIC = 7,
} DapdStatus;

/**
 * Opaque denoiser: either a loaded checkpoint or the exact oracle.
 */
typedef struct DapdDenoiser DapdDenoiser;

/**
 * Plain-data mirror of the decoding strategy settings.
 */
typedef struct DapdStrategyConfig {
  enum DapdStrategyKind kind;
  size_t k;
  double conf_thresh;
  double kl_thresh;
  double tau_min;
  double tau_max;
  double switch_mask_ratio;
  double top_layer_fraction;
  enum DapdCommitter committer;
} DapdStrategyConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the next call.
 */
const char *dapd_last_error(void);

/**
 * Default settings for `kind`.
 */
struct DapdStrategyConfig dapd_strategy_default(enum DapdStrategyKind kind);

/**
 * Creates the exact oracle denoiser.
 *
 * # Safety
 * `out` must be a valid pointer to write the handle to.
 */
enum DapdStatus dapd_denoiser_oracle(struct DapdDenoiser **out);

/**
 * Loads a checkpoint file as a denoiser.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DapdStatus dapd_denoiser_load(const char *path, struct DapdDenoiser **out);

/**
 * Releases a denoiser. Null is ignored.
 *
 * # Safety
 * `d` must come from a `dapd_denoiser_*` constructor and not be used afterwards.
 */
void dapd_denoiser_free(struct DapdDenoiser *d);

/**
 * Attention layers and heads of a model; both zero for the oracle.
 *
 * # Safety
 * `d` must be a live handle; `layers` and `heads` valid pointers.
 */
enum DapdStatus dapd_denoiser_shape(const struct DapdDenoiser *d, size_t *layers, size_t *heads);

/**
 * One forward pass. Writes `9 x 3` marginals (rows of observed positions are zero)
 * and, if `attention` is non-null, `layers * heads * 9 * 9` attention weights
 * (for the oracle: one `9 x 9` binary edge-score map).
 *
 * # Safety
 * `tokens` must hold 9 values, `marginals` room for 27, `attention` room as described.
 */
enum DapdStatus dapd_forward(const struct DapdDenoiser *d,
                             const int32_t *tokens,
                             double *marginals,
                             double *attention);

/**
 * Decodes a toy sequence to completion. `final_tokens` receives 9 symbols and
 * `nfe` the number of forward passes. If `trace_json` is non-null it receives the
 * trace as a JSON string to be released with `dapd_string_free`.
 *
 * # Safety
 * All pointers must be valid; `initial` holds 9 values and `final_tokens` room for 9.
 */
enum DapdStatus dapd_decode(const struct DapdDenoiser *d,
                            const struct DapdStrategyConfig *strategy,
                            const int32_t *initial,
                            uint64_t seed,
                            uint32_t *final_tokens,
                            size_t *nfe,
                            char **trace_json);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void dapd_string_free(char *s);

/**
 * Greedy independent-set selection on an `n x n` score matrix: symmetrizes the
 * scores, keeps edges with score `> tau`, and scans nodes by descending weight
 * (ties by index). Writes the selected node indices in admission order.
 *
 * # Safety
 * `scores` holds `n * n` values, `weights` `n` values, `members` room for `n`.
 */
enum DapdStatus dapd_welsh_powell_select(const double *scores,
                                         size_t n,
                                         double tau,
                                         const double *weights,
                                         size_t *members,
                                         size_t *count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DAPD_H */
