#ifndef PROXQ_H
#define PROXQ_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define PROXQ_N_ACTIONS 5

typedef enum ProxqAgentKind {
  PROXQ_AGENT_KIND_CONSTRAINT_AWARE = 0,
  PROXQ_AGENT_KIND_IQL = 1,
  PROXQ_AGENT_KIND_CQL = 2,
  PROXQ_AGENT_KIND_BC = 3,
} ProxqAgentKind;

typedef enum ProxqStatus {
  PROXQ_STATUS_OK = 0,
  PROXQ_STATUS_NULL_POINTER = 1,
  PROXQ_STATUS_DOMAIN = 2,
  PROXQ_STATUS_SOLVER = 3,
  PROXQ_STATUS_CONFIG = 4,
  PROXQ_STATUS_TRAINING = 5,
  PROXQ_STATUS_IO = 6,
  PROXQ_STATUS_FORMAT = 7,
  PROXQ_STATUS_PANIC = 8,
} ProxqStatus;

/**
 * Opaque trained-agent handle.
 */
typedef struct ProxqAgent ProxqAgent;

/**
 * Opaque dataset handle.
 */
typedef struct ProxqDataset ProxqDataset;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next call into the library from the same thread.
 */
const char *proxq_last_error(void);

/**
 * Euclidean projection of `q` onto nondecreasing rows.
 *
 * # Safety
 * `q` and `out` must point to 5 readable / writable doubles.
 */
enum ProxqStatus proxq_project_monotone(const double *q, double *out);

/**
 * Proximal map of `lambda` times the monotone penalty at `y`.
 *
 * # Safety
 * `y` and `out` must point to 5 readable / writable doubles.
 */
enum ProxqStatus proxq_prox_monotone(const double *y, double lambda, double tol, double *out);

/**
 * Squared-hinge monotonicity penalty of `q`.
 *
 * # Safety
 * `q` must point to 5 readable doubles and `out` to one writable double.
 */
enum ProxqStatus proxq_monotone_penalty(const double *q, double *out);

/**
 * Click probability for bid fraction `bid` in state `(x, c)`.
 *
 * # Safety
 * `out` must point to one writable double.
 */
enum ProxqStatus proxq_click_prob(double x, double c, double bid, double *out);

/**
 * Best expected one-step reward over the 5 bids in state `(x, c)`.
 *
 * # Safety
 * `out` must point to one writable double.
 */
enum ProxqStatus proxq_optimal_value(double x, double c, double *out);

/**
 * Bid fraction for action index `a`.
 *
 * # Safety
 * `out` must point to one writable double.
 */
enum ProxqStatus proxq_bid(size_t a, double *out);

/**
 * Generates a behavior dataset of `n` transitions.
 *
 * # Safety
 * `out` must be a writable handle slot; free the result with
 * [`proxq_dataset_free`].
 */
enum ProxqStatus proxq_dataset_generate(size_t n, uint64_t seed, struct ProxqDataset **out);

/**
 * Loads a JSON Lines dataset.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a writable handle slot.
 */
enum ProxqStatus proxq_dataset_load(const char *path, struct ProxqDataset **out);

/**
 * # Safety
 * `data` must be a live dataset handle and `path` a nul-terminated string.
 */
enum ProxqStatus proxq_dataset_save(const struct ProxqDataset *data, const char *path);

/**
 * # Safety
 * `data` must be a live dataset handle and `out` one writable size.
 */
enum ProxqStatus proxq_dataset_len(const struct ProxqDataset *data, size_t *out);

/**
 * Releases a dataset; null is ignored.
 *
 * # Safety
 * `data` must be null or a handle not yet freed.
 */
void proxq_dataset_free(struct ProxqDataset *data);

/**
 * Trains an agent. `config_json` holds training options as a JSON object
 * (unknown keys rejected); null means defaults.
 *
 * # Safety
 * `data` must be a live dataset handle, `config_json` null or a
 * nul-terminated string, `out` a writable handle slot.
 */
enum ProxqStatus proxq_agent_train(enum ProxqAgentKind kind,
                                   const struct ProxqDataset *data,
                                   const char *config_json,
                                   struct ProxqAgent **out);

/**
 * Critic Q-row at state `(x, c)`.
 *
 * # Safety
 * `agent` must be a live handle and `out` point to 5 writable doubles.
 */
enum ProxqStatus proxq_agent_q_row(const struct ProxqAgent *agent, double x, double c, double *out);

/**
 * Policy action probabilities at state `(x, c)`.
 *
 * # Safety
 * `agent` must be a live handle and `out` point to 5 writable doubles.
 */
enum ProxqStatus proxq_agent_policy(const struct ProxqAgent *agent,
                                    double x,
                                    double c,
                                    double *out);

/**
 * Monotonicity violations of the critic on the 50 x 20 evaluation grid.
 *
 * # Safety
 * `agent` must be a live handle and `out` one writable size.
 */
enum ProxqStatus proxq_agent_monotonicity_errors(const struct ProxqAgent *agent, size_t *out);

/**
 * Releases an agent; null is ignored.
 *
 * # Safety
 * `agent` must be null or a handle not yet freed.
 */
void proxq_agent_free(struct ProxqAgent *agent);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* PROXQ_H */
