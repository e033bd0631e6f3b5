#ifndef TELLDRIVE_H
#define TELLDRIVE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TellStatus {
  TELL_STATUS_OK = 0,
  TELL_STATUS_NULL_POINTER = 1,
  TELL_STATUS_INVALID_ARGUMENT = 2,
  TELL_STATUS_CONFIG = 3,
  TELL_STATUS_USAGE = 4,
  TELL_STATUS_CHECKPOINT = 5,
  TELL_STATUS_ARCHITECTURE = 6,
  TELL_STATUS_IO = 7,
  TELL_STATUS_INTERNAL = 8,
} TellStatus;

typedef enum TellScenario {
  TELL_SCENARIO_INTERSECTION = 0,
  TELL_SCENARIO_MERGE = 1,
  TELL_SCENARIO_HIGHWAY = 2,
} TellScenario;

// Policy network handle.
typedef struct TellPolicy TellPolicy;

// Simulator handle.
typedef struct TellSim TellSim;

typedef struct TellStepResult {
  double reward;
  // Smallest conflict time after the step; `INFINITY` when conflict-free.
  double tau_min;
  bool done;
  bool collision;
  bool off_road;
  bool success;
  bool timeout;
} TellStepResult;

typedef struct TellVehicle {
  uint32_t id;
  double x;
  double y;
  double speed;
  double heading;
  int32_t lane;
} TellVehicle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after success.
// The pointer stays valid until the next call on the same thread.
const char *tell_last_error(void);

// Length of the policy input vector.
size_t tell_feature_dim(void);

// Number of discrete maneuvers.
size_t tell_action_count(void);

// Creates a simulator for a scenario preset (a `TellScenario` value)
// and resets it with `seed`.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum TellStatus tell_sim_new(uint32_t scenario, uint64_t seed, struct TellSim **out);

// Releases a simulator. Null is ignored.
//
// # Safety
// `sim` must come from [`tell_sim_new`] and not be used afterwards.
void tell_sim_free(struct TellSim *sim);

// Advances one decision period. `maneuver` is 0..5 in the order
// slow down, cruise, speed up, turn left, turn right.
//
// # Safety
// `sim` must be a live handle and `out` valid for one write.
enum TellStatus tell_sim_step(struct TellSim *sim, uint32_t maneuver, struct TellStepResult *out);

// Writes the scaled policy features of the current state into `buf`.
//
// # Safety
// `sim` must be a live handle and `buf` valid for `len` doubles.
enum TellStatus tell_sim_features(const struct TellSim *sim, double *buf, size_t len);

// Copies the ego vehicle state.
//
// # Safety
// `sim` must be a live handle and `out` valid for one write.
enum TellStatus tell_sim_ego(const struct TellSim *sim, struct TellVehicle *out);

// Conflict time of two constant-velocity points: the time of closest
// approach within `horizon` if the gap then is at most `radius`, else
// `INFINITY`. Positions and velocities are `[x, y]`.
//
// # Safety
// The four arrays must each hold two doubles and `out` one.
enum TellStatus tell_ttcp(const double *ego_pos,
                          const double *ego_vel,
                          const double *other_pos,
                          const double *other_vel,
                          double radius,
                          double horizon,
                          double *out);

// Creates a freshly initialised policy; `fusion` selects the attention
// network with the teacher path.
//
// # Safety
// `out` must be valid for one write.
enum TellStatus tell_policy_new(bool fusion, uint64_t seed, struct TellPolicy **out);

// Loads parameters from a checkpoint file. Corrupt files report
// `CHECKPOINT`, a network of a different shape `ARCHITECTURE`.
//
// # Safety
// `policy` must be a live handle and `path` a nul-terminated UTF-8 string.
enum TellStatus tell_policy_load(struct TellPolicy *policy, const char *path);

// Greedy action for the simulator's current state. When `probs` is not
// null it receives the action distribution.
//
// # Safety
// Handles must be live, `action` valid for one write and `probs`, if not
// null, valid for [`tell_action_count`] doubles.
enum TellStatus tell_policy_act(const struct TellPolicy *policy,
                                const struct TellSim *sim,
                                uint32_t *action,
                                double *probs);

// Releases a policy. Null is ignored.
//
// # Safety
// `policy` must come from [`tell_policy_new`] and not be used afterwards.
void tell_policy_free(struct TellPolicy *policy);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TELLDRIVE_H */
