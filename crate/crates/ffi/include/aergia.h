#ifndef AERGIA_H
#define AERGIA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AergiaStatus {
  AERGIA_STATUS_OK = 0,
  AERGIA_STATUS_NULL_POINTER = 1,
  AERGIA_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The configuration parsed but failed validation.
   */
  AERGIA_STATUS_VALIDATION = 3,
  AERGIA_STATUS_RUNTIME = 4,
  AERGIA_STATUS_PANIC = 5,
} AergiaStatus;

/**
 * Parsed experiment configuration.
 */
typedef struct AergiaConfig AergiaConfig;

/**
 * Label-distribution oracle; see `aergia_oracle_submit`.
 */
typedef struct AergiaOracle AergiaOracle;

/**
 * Results of every (strategy, seed) pair of one experiment run.
 */
typedef struct AergiaRun AergiaRun;

typedef struct AergiaSummary {
  size_t rounds;
  double total_time;
  double final_accuracy;
  double best_accuracy;
  double mean_round_duration;
  double median_round_duration;
  size_t total_offloads;
  size_t total_dropped;
} AergiaSummary;

/**
 * One round of one run.
 */
typedef struct AergiaRoundRecord {
  size_t round;
  double start_time;
  double duration;
  double accuracy;
  size_t num_selected;
  size_t num_dropped;
  size_t num_offloads;
  size_t aggregated_weight;
} AergiaRoundRecord;

typedef struct AergiaOffloadPoint {
  /**
   * Estimated completion of the slower client of the pair.
   */
  double ct;
  /**
   * Batches offloaded.
   */
  size_t d;
} AergiaOffloadPoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL after a
 * success. Valid until the next call into this library on the same thread.
 */
const char *aergia_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *aergia_version(void);

/**
 * Parses and validates a TOML experiment configuration.
 *
 * # Safety
 * `toml` must be a NUL-terminated string; `out` must be writable.
 */
enum AergiaStatus aergia_config_from_toml(const char *toml, struct AergiaConfig **out);

/**
 * # Safety
 * `config` must be NULL or a handle from `aergia_config_from_toml` not yet freed.
 */
void aergia_config_free(struct AergiaConfig *config);

/**
 * Runs every strategy over every replicate seed of `config`.
 *
 * # Safety
 * `config` must be a live config handle; `out` must be writable.
 */
enum AergiaStatus aergia_run(const struct AergiaConfig *config, struct AergiaRun **out);

/**
 * # Safety
 * `run` must be NULL or a handle from `aergia_run` not yet freed.
 */
void aergia_run_free(struct AergiaRun *run);

/**
 * Number of (strategy, seed) results, ordered by strategy then seed.
 *
 * # Safety
 * `run` must be a live run handle; `out` must be writable.
 */
enum AergiaStatus aergia_run_result_count(const struct AergiaRun *run, size_t *out);

/**
 * Strategy label and seed of result `index`. The label stays valid until
 * the run is freed.
 *
 * # Safety
 * `run` must be a live run handle; `label` and `seed` must be writable.
 */
enum AergiaStatus aergia_run_result_info(const struct AergiaRun *run,
                                         size_t index,
                                         const char **label,
                                         uint64_t *seed);

/**
 * # Safety
 * `run` must be a live run handle; `out` must be writable.
 */
enum AergiaStatus aergia_run_summary(const struct AergiaRun *run,
                                     size_t index,
                                     struct AergiaSummary *out);

/**
 * Round `round` of result `index`.
 *
 * # Safety
 * `run` must be a live run handle; `out` must be writable.
 */
enum AergiaStatus aergia_run_round(const struct AergiaRun *run,
                                   size_t index,
                                   size_t round,
                                   struct AergiaRoundRecord *out);

/**
 * Best offload point for a weak client with per-batch time `t_a` and
 * `r_a` remaining batches paired with a strong client with per-batch time
 * `t_b`, feature-backward time `x_b` and `r_b` remaining batches.
 *
 * # Safety
 * `out` must be writable.
 */
enum AergiaStatus aergia_calc_op(double t_a,
                                 double t_b,
                                 double x_b,
                                 size_t r_a,
                                 size_t r_b,
                                 struct AergiaOffloadPoint *out);

/**
 * # Safety
 * `out` must be writable.
 */
enum AergiaStatus aergia_oracle_new(size_t num_classes, struct AergiaOracle **out);

/**
 * # Safety
 * `oracle` must be NULL or a handle from `aergia_oracle_new` not yet freed.
 */
void aergia_oracle_free(struct AergiaOracle *oracle);

/**
 * Submits one client's per-class sample counts. Each client may submit once.
 *
 * # Safety
 * `oracle` must be a live oracle handle; `counts` must point to `len`
 * readable values.
 */
enum AergiaStatus aergia_oracle_submit(const struct AergiaOracle *oracle,
                                       uint32_t client_id,
                                       const uint64_t *counts,
                                       size_t len);

/**
 * Writes the pairwise distance matrix over all submitted clients,
 * row-major in ascending client-id order, into `matrix` (capacity `cap`
 * values) and the client count into `n`. With `matrix` NULL only `n` is
 * written; a too-small buffer fails with `INVALID_ARGUMENT` after
 * writing `n`.
 *
 * # Safety
 * `oracle` must be a live oracle handle; `n` must be writable; `matrix`
 * must be NULL or point to `cap` writable values.
 */
enum AergiaStatus aergia_oracle_compute(const struct AergiaOracle *oracle,
                                        double *matrix,
                                        size_t cap,
                                        size_t *n);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AERGIA_H */
