#ifndef TPC_H
#define TPC_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result code of every exported function.
 */
typedef enum TpcStatus {
  TPC_STATUS_OK = 0,
  TPC_STATUS_NULL_POINTER = 1,
  TPC_STATUS_INVALID_ARGUMENT = 2,
  TPC_STATUS_SHAPE = 3,
  TPC_STATUS_DOMAIN = 4,
  TPC_STATUS_CONTRACT = 5,
  TPC_STATUS_NON_FINITE = 6,
  TPC_STATUS_CONFIG = 7,
  TPC_STATUS_CHECKPOINT = 8,
  TPC_STATUS_LOAD = 9,
  TPC_STATUS_IO = 10,
  TPC_STATUS_PANIC = 11,
} TpcStatus;

/**
 * Opaque agent handle: a restored agent plus its filtering state.
 */
typedef struct TpcAgent TpcAgent;

/**
 * Opaque environment handle.
 */
typedef struct TpcEnv TpcEnv;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` as a
 * NUL-terminated string, truncating to `len − 1` bytes. Returns the full
 * message length in bytes (excluding the terminator).
 *
 * # Safety
 * `buf` must be null or valid for `len` writable bytes.
 */
size_t tpc_last_error(char *buf, size_t len);

/**
 * Creates an environment with a clean background.
 *
 * `task` is `"pendulum_lite"` or `"pointmass_lite"`; `episode_length` counts
 * physics steps and must be a multiple of `action_repeat`.
 *
 * # Safety
 * `task` must be a NUL-terminated string and `out` valid for one write.
 */
enum TpcStatus tpc_env_new(const char *task,
                           size_t image_size,
                           size_t action_repeat,
                           size_t episode_length,
                           struct TpcEnv **out);

/**
 * # Safety
 * `env` must be null or a handle from [`tpc_env_new`] not yet freed.
 */
void tpc_env_free(struct TpcEnv *env);

/**
 * Number of pixels in one observation.
 *
 * # Safety
 * `env` must be a live handle and `out` valid for one write.
 */
enum TpcStatus tpc_env_obs_len(const struct TpcEnv *env, size_t *out);

/**
 * # Safety
 * `env` must be a live handle and `out` valid for one write.
 */
enum TpcStatus tpc_env_action_dim(const struct TpcEnv *env, size_t *out);

/**
 * Starts an episode and writes the first observation.
 *
 * # Safety
 * `env` must be a live handle; `obs` valid for `obs_len` writes.
 */
enum TpcStatus tpc_env_reset(struct TpcEnv *env, uint64_t seed, double *obs, size_t obs_len);

/**
 * Applies `action` (clamped to `[−1, 1]`) and writes the next observation,
 * the summed reward and whether the episode ended.
 *
 * # Safety
 * `env` must be a live handle; `action` valid for `action_len` reads, `obs`
 * for `obs_len` writes, `reward` and `done` for one write each.
 */
enum TpcStatus tpc_env_step(struct TpcEnv *env,
                            const double *action,
                            size_t action_len,
                            double *obs,
                            size_t obs_len,
                            double *reward,
                            bool *done);

/**
 * Restores an agent from a JSON checkpoint written by `tpc train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for one write.
 */
enum TpcStatus tpc_agent_load(const char *path, struct TpcAgent **out);

/**
 * # Safety
 * `agent` must be null or a handle from [`tpc_agent_load`] not yet freed.
 */
void tpc_agent_free(struct TpcAgent *agent);

/**
 * Fails with `TPC_STATUS_CHECKPOINT` unless `env` renders images and takes
 * actions of the sizes the agent was trained on.
 *
 * # Safety
 * Both handles must be live.
 */
enum TpcStatus tpc_agent_check_env(const struct TpcAgent *agent, const struct TpcEnv *env);

/**
 * Begins an episode from its first observation.
 *
 * # Safety
 * `agent` must be a live handle; `obs` valid for `obs_len` reads.
 */
enum TpcStatus tpc_agent_reset(struct TpcAgent *agent, const double *obs, size_t obs_len);

/**
 * Writes the policy's action for the current state. `noise_std` adds
 * Gaussian exploration noise (0 gives the mode action).
 *
 * # Safety
 * `agent` must be a live handle; `action` valid for `action_len` writes.
 */
enum TpcStatus tpc_agent_act(struct TpcAgent *agent,
                             double noise_std,
                             double *action,
                             size_t action_len);

/**
 * Feeds back the action that was taken and the observation that followed.
 *
 * # Safety
 * `agent` must be a live handle; `action` valid for `action_len` reads and
 * `obs` for `obs_len` reads.
 */
enum TpcStatus tpc_agent_observe(struct TpcAgent *agent,
                                 const double *action,
                                 size_t action_len,
                                 const double *obs,
                                 size_t obs_len);

/**
 * λ-returns `V_λ(τ)` for `τ = 0..horizon` from `horizon` rewards and
 * `horizon + 1` values (the last one bootstraps).
 *
 * # Safety
 * `rewards` and `out` must be valid for `horizon` elements, `values` for
 * `horizon + 1`.
 */
enum TpcStatus tpc_lambda_return(const double *rewards,
                                 const double *values,
                                 size_t horizon,
                                 double gamma,
                                 double lambda,
                                 double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TPC_H */
