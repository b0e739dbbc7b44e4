#pragma once

#include "dexmoe/policy.hpp"
#include "dexmoe/rollout.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace dexmoe {

// Gradient accumulation always runs over this many fixed shards, reduced in
// shard order, so results are independent of the worker count.
constexpr int kGradShards = 8;

struct PpoConfig {
    double clip = 0.2;
    double gamma = 0.99;
    double lambda = 0.95;
    double lr = 5e-3;
    double kl_threshold = 0.02;
    int minibatch_size = 16384;
    int epochs = 4;
    double entropy_coef = 0.0;
    double value_coef = 0.5;
    double max_grad_norm = 1.0;
    int n_workers = 1;

    void validate() const;
};

struct RolloutBatch {
    int horizon = 0;
    int n_envs = 0;
    // Row layout: sample (t, e) lives at index t * n_envs + e.
    std::vector<Vec> obs;      // 66 each
    std::vector<Vec> z;        // 66 each, computed under the collecting snapshot
    std::vector<Vec> e_phys;   // 19 each
    std::vector<Vec> e_shape;  // 38 each
    std::vector<Vec> action;   // 11 each, unclamped draws
    std::vector<int> object_index;
    Vec log_prob;
    Vec reward;
    Vec value;
    std::vector<uint8_t> done;
    Vec bootstrap_value;  // one per env, value of the post-rollout state
    Vec advantages;       // filled by prepare_batch, normalized
    Vec returns;
    std::vector<int> episode_success;  // S of each episode completed during collection
    int episodes_dropped = 0;

    size_t size() const { return obs.size(); }
};

// Which ensemble components an update may change; everything else must remain
// bitwise identical.
struct TrainableMask {
    bool mu_pc = false;
    bool mu_e = false;
    bool base = false;
    bool gate = false;
    std::vector<bool> experts;

    bool any() const;
    bool expert(int i) const {
        return i >= 0 && i < static_cast<int>(experts.size()) && experts[static_cast<size_t>(i)];
    }
};

// How the update evaluates the ensemble on a sample. `objects` is required
// whenever mu_pc is trainable (shape embeddings must be recomputed) and in
// expert mode for the object-to-expert map.
struct ForwardSpec {
    RolloutPolicy mode = RolloutPolicy::base;
    std::vector<int> expert_of_object;
    const std::vector<ObjectSpec>* objects = nullptr;
};

struct GradSet {
    nn::NetGrads mu_pc, mu_e, base, gate;
    std::vector<nn::NetGrads> experts;
    Vec d_base_log_std;
    std::vector<Vec> d_expert_log_std;

    void init_like(const PolicyEnsemble& ens);
    void zero();
    void add(const GradSet& other);
    double sq_norm(const TrainableMask& mask) const;
    void scale(double s);
};

// Adam moments for every component, stepped only where the mask allows. A
// policy component covers its trunk parameters plus the log-std block.
struct AdamBank {
    nn::AdamState mu_pc, mu_e, base, gate;
    std::vector<nn::AdamState> experts;

    void init_like(PolicyEnsemble& ens);
};

std::vector<std::span<double>> policy_param_blocks(PolicyNet& p);

struct LossTerms {
    double policy_loss = 0;
    double value_loss = 0;
    double entropy = 0;
    double total = 0;
    double approx_kl = 0;
    bool finite = true;
};

// delta_t = r_t + gamma * V_{t+1} * (1 - done_t) - V_t, accumulated backward
// with factor gamma * lambda * (1 - done_t). Returns are advantages + values.
void compute_gae(std::span<const double> rewards, std::span<const double> values,
                 std::span<const uint8_t> dones, std::span<const double> bootstrap, int horizon,
                 int n_envs, double gamma, double lambda, Vec& advantages, Vec& returns);

// Shifts to mean zero and scales to unit standard deviation (floor 1e-8).
void normalize_advantages(Vec& advantages);

LossTerms ppo_loss(std::span<const double> old_log_prob, std::span<const double> advantages,
                   std::span<const double> returns, std::span<const double> old_values,
                   std::span<const double> new_log_prob, std::span<const double> new_values,
                   std::span<const double> entropies, const PpoConfig& cfg);

// kl above twice the threshold shrinks lr by 2/3 (floor 1e-6); below half the
// threshold grows it by 3/2 (cap 1e-2); the band between leaves it unchanged.
double adaptive_lr(double current_lr, double approx_kl, double kl_threshold);

// Runs `horizon` batch steps and records every transition plus bootstrap
// values. Throws if any env fails.
RolloutBatch collect_rollout(EnvRuntime& rt, const PolicyEnsemble& ens, const ForwardSpec& spec,
                             int horizon, bool stochastic = true);

// Fills advantages (normalized) and returns from the raw batch fields.
void prepare_batch(RolloutBatch& batch, double gamma, double lambda);

struct MinibatchEval {
    LossTerms loss;
    GradSet grads;
    Vec new_log_prob;
    Vec new_values;
    Vec entropies;
};

// Loss and parameter gradients over the given sample rows of a prepared
// batch. Gradients are populated only for trainable components.
MinibatchEval evaluate_minibatch(const PolicyEnsemble& ens, const RolloutBatch& batch,
                                 std::span<const size_t> rows, const PpoConfig& cfg,
                                 const ForwardSpec& spec, const TrainableMask& mask);

struct UpdateStats {
    double policy_loss = 0;
    double value_loss = 0;
    double entropy = 0;
    double total_loss = 0;
    double approx_kl = 0;
    double grad_norm = 0;  // pre-clip global norm, averaged over minibatches
    int minibatches = 0;
    int skipped = 0;
};

// Multi-epoch minibatched PPO step over the batch. Shuffling draws from
// `shuffle_rng`; frozen components are hash-checked before and after.
UpdateStats ppo_update(PolicyEnsemble& ens, RolloutBatch& batch, const PpoConfig& cfg,
                       const TrainableMask& mask, const ForwardSpec& spec, AdamBank& bank,
                       Rng& shuffle_rng);

}  // namespace dexmoe
