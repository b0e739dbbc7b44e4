#pragma once

#include <string>
#include <variant>
#include <vector>

#include "dexmoe/env.hpp"
#include "dexmoe/policy.hpp"
#include "dexmoe/ppo.hpp"

namespace dexmoe {

// Every tunable of a run, addressable by a flat dotted key. Defaults are the
// published full-scale values; configs/desk.json scales them down.
struct RunConfig {
    int num_envs = 32768;
    int episode_length = 600;
    double smoothing_alpha = 0.8;
    double success_theta = 0.4;
    double success_tau_q = 10.0;
    double success_tau_v = 0.04;
    double success_tau_omega = 0.5;
    int success_hold_window = 5;
    double reward_c_success = 800.0;
    double reward_c_dist = -10.0;
    double reward_c_rot = -1.0;
    double reward_c_action = -0.0002;
    double reward_c_omega = -0.01;
    double reward_omega_clip = 5.0;
    double reward_epsilon = 0.1;

    int horizon = 8;
    int minibatch_size = 16384;
    double lr = 5e-3;
    double clip = 0.2;
    double kl_threshold = 0.02;
    double gamma = 0.99;
    double lambda = 0.95;
    int epochs = 4;
    double entropy_coef = 0.0;
    double value_coef = 0.5;
    double max_grad_norm = 1.0;

    std::vector<int> mu_pc_hidden{32, 32, 32};
    std::vector<int> mu_e_hidden{256, 128};
    std::vector<int> policy_hidden{512, 512};
    int gate_hidden = 64;

    int expert_count = 6;
    std::string router = "soft";
    int topk_k = 2;
    int gate_view = 38;

    int object_count = 150;

    int base_updates = 300;
    int expert_updates = 150;
    int gate_updates = 100;
    int checkpoint_every = 50;
    int probe_episodes = 1;
    int probe_objects_per_category = 4;

    int eval_episodes = 20;
    double eval_theta = 0.1;

    uint64_t seed = 0;
};

using ConfigRef = std::variant<int RunConfig::*, double RunConfig::*, uint64_t RunConfig::*,
                               std::string RunConfig::*, std::vector<int> RunConfig::*>;

struct ConfigField {
    const char* key;
    ConfigRef ref;
    const char* provenance;  // "paper" or "invented"
};

inline constexpr int kConfigSchemaVersion = 1;

const std::vector<ConfigField>& config_schema();

// Flat JSON object keyed by the schema's dotted names. Unknown keys and type
// mismatches throw with the offending key in the message.
RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::string& path);

// Fully resolved config as sorted flat JSON, byte-stable across runs.
std::string config_to_json(const RunConfig& cfg);

// FNV-1a over canonical "key=value" lines in schema key order.
uint64_t config_hash(const RunConfig& cfg);

std::string config_value_text(const RunConfig& cfg, const ConfigField& field);

void validate_config(const RunConfig& cfg);

EnvConfig env_config(const RunConfig& cfg);
SuccessThresholds eval_thresholds(const RunConfig& cfg);
PpoConfig ppo_config(const RunConfig& cfg);
EnsembleConfig ensemble_config(const RunConfig& cfg, int n_experts);
RouterMode router_from_text(const std::string& name);

}  // namespace dexmoe
