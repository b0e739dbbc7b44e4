#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "dexmoe/checkpoint.hpp"
#include "dexmoe/config.hpp"

namespace dexmoe {

// Episode outcomes averaged for the running success metric.
inline constexpr int kSuccessWindow = 128;

// Which training objects each expert sees. The subsets are the data filter:
// a rollout for expert i may only contain objects from objects_of_expert[i].
struct ExpertTaxonomy {
    int n_experts = 0;
    std::vector<std::vector<int>> objects_of_expert;
    std::vector<std::string> roles;  // "generalist" or "specialist"
    std::vector<std::string> names;

    // Checks the layout is one of 1/4/6/8, subsets are nonempty train ids,
    // and every category in the training split is covered.
    void validate(const std::vector<ObjectSpec>& objects, int train_count) const;
};

// Deterministic 2-means on pc_features: seeded with the farthest pair,
// refined by Lloyd iterations, clusters ordered by their smallest member.
std::array<std::vector<int>, 2> split_two_clusters(const std::vector<ObjectSpec>& objects,
                                                   const std::vector<int>& ids);

// Indices of the k lowest scores, ties toward the lower category index.
std::vector<int> worst_categories(const std::array<double, kNumCategories>& scores, int k);

// Layouts: 1 = one generalist on everything; 6 = one specialist per
// category; 4 = specialists on the three worst-scoring categories plus a
// generalist on everything (requires scores); 8 = per-category specialists
// with each jam category split in two by clustering.
ExpertTaxonomy build_taxonomy(int n_experts, const std::vector<ObjectSpec>& objects,
                              int train_count,
                              const std::array<double, kNumCategories>* category_scores);

// Env stream seed for a stage unit, distinct across stages and units.
uint64_t stage_seed(uint64_t seed, Stage stage, int unit);

// Round-robin assignment of `n_envs` env slots over an object subset.
std::vector<int> round_robin_envs(int n_envs, const std::vector<int>& subset);

// Mean episode successes of the base policy under deterministic mean
// actions, per category, over a few training objects each.
std::array<double, kNumCategories> probe_category_scores(const PolicyEnsemble& ens,
                                                         const std::vector<ObjectSpec>& objects,
                                                         const RunConfig& cfg, int n_workers);

// One stage unit of PPO training over a fixed env population. Owns the
// ensemble, optimizer, env states, and rng streams; a snapshot captures all
// of them so training continues bitwise after a save/load cycle.
class Trainer {
  public:
    Trainer(const RunConfig& cfg, const std::vector<ObjectSpec>& objects, Stage stage, int unit,
            const std::vector<int>& env_objects, PolicyEnsemble ens, int n_workers);

    // Resumes from a snapshot; the config and object corpus must hash to
    // what the snapshot was trained under.
    Trainer(const RunConfig& cfg, const std::vector<ObjectSpec>& objects, const CheckpointData& ck,
            int n_workers);

    UpdateStats step();
    CheckpointData snapshot() const;

    Stage stage() const { return stage_; }
    int unit() const { return unit_; }
    int update_index() const { return update_index_; }
    double lr() const { return lr_; }
    double mean_success() const;
    double last_mean_reward() const { return last_mean_reward_; }
    uint64_t episodes_completed() const { return episodes_; }
    uint64_t audit_samples() const { return audit_samples_; }
    const PolicyEnsemble& ensemble() const { return ens_; }

  private:
    ForwardSpec forward_spec() const;
    void finish_setup();

    RunConfig cfg_;
    uint64_t config_hash_ = 0;
    uint64_t objects_hash_ = 0;
    Stage stage_ = Stage::base;
    int unit_ = 0;
    int n_workers_ = 1;
    EnvRuntime rt_;
    PolicyEnsemble ens_;
    AdamBank bank_;
    TrainableMask mask_;
    std::vector<int> allowed_;
    Rng train_rng_{0};
    double lr_ = 0.0;
    std::vector<double> ring_;
    uint32_t cursor_ = 0;
    uint64_t episodes_ = 0;
    uint64_t audit_samples_ = 0;
    int update_index_ = 0;
    double last_mean_reward_ = 0.0;
};

struct StageResult {
    CheckpointData final;
    bool diverged = false;
    std::string error;
    int updates_run = 0;
    ExpertTaxonomy taxonomy;  // filled by the expert stage
};

// Each driver writes a rolling <stage>_last.ckpt at the stage start and
// every checkpoint_every updates, a final <stage>.ckpt on completion, and a
// per-unit stats CSV. On divergence the result carries the last snapshot
// that trained cleanly.
StageResult run_base_stage(const RunConfig& cfg, const std::vector<ObjectSpec>& objects,
                           const CheckpointData* from, const std::string& out_dir, int n_workers);
StageResult run_experts_stage(const RunConfig& cfg, const std::vector<ObjectSpec>& objects,
                              const CheckpointData& from, const std::string& out_dir,
                              int n_workers);
StageResult run_gate_stage(const RunConfig& cfg, const std::vector<ObjectSpec>& objects,
                           const CheckpointData& from, const std::string& out_dir, int n_workers);

struct PipelineResult {
    StageResult base;
    StageResult experts;
    StageResult gate;
    bool completed = false;
};

PipelineResult run_full_pipeline(const RunConfig& cfg, const std::vector<ObjectSpec>& objects,
                                 const std::string& out_dir, int n_workers);

}  // namespace dexmoe
