#pragma once

#include "dexmoe/env.hpp"
#include "dexmoe/objects.hpp"
#include "dexmoe/policy.hpp"
#include "dexmoe/rng.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace dexmoe {

// One environment instance plus everything that makes its trajectory a pure
// function of (seed, env_id) under a fixed policy snapshot.
struct EnvSlot {
    uint64_t env_id = 0;
    int object_index = 0;
    EnvState state;
    SmootherState smoother;
    Rng rng{0};
};

struct EnvRuntime {
    std::vector<ObjectSpec> objects;
    std::vector<EnvSlot> envs;
    EnvConfig cfg;
    uint64_t seed = 0;
    int n_workers = 1;
    double smoothing_alpha = 0.8;
};

// Builds slots with env_id equal to the slot index and objects assigned
// round-robin from `object_of_env` (one entry per env), then resets each env
// from its own stream.
EnvRuntime make_runtime(std::vector<ObjectSpec> objects, const std::vector<int>& object_of_env,
                        const EnvConfig& cfg, uint64_t seed, int n_workers,
                        double smoothing_alpha);

void reset_slot(EnvRuntime& rt, size_t slot);

enum class RolloutPolicy { base, expert, moe };

struct TransitionRecord {
    Vec obs;      // observation the action was computed from
    Vec e_phys;   // privileged vector for the same state
    Vec e_shape;  // shape descriptor of the env's object under the snapshot
    Vec z;        // privileged embedding fed to the policy
    int object_index = 0;
    uint64_t env_id = 0;
    Vec action_raw;   // unclamped Gaussian draw (equals the mean when deterministic)
    Vec action_exec;  // smoothed, clamped command the environment executed
    double log_prob = 0;
    double value = 0;
    double reward = 0;
    bool done = false;
    bool dropped = false;
    bool reached = false;
    int success_count = 0;  // episode total after this step
    double dtheta = 0;
};

struct BatchStep {
    std::vector<TransitionRecord> transitions;  // one per env slot
    std::vector<std::string> errors;            // non-empty marks a failed slot
    bool all_ok() const;
};

// Advances every env one control step under an immutable policy snapshot.
// Terminal envs are reset in place after their transition is recorded, so the
// runtime is always ready for the next call. In expert mode
// `expert_of_env[slot]` picks the network; in moe mode the gate routes.
// Per-slot failures are captured in `errors` without aborting the batch.
BatchStep batch_step(EnvRuntime& rt, const PolicyEnsemble& ens, RolloutPolicy mode,
                     const std::vector<int>& expert_of_env = {}, bool stochastic = true);

}  // namespace dexmoe
