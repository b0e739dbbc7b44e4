#pragma once

#include <array>
#include <span>
#include <string>

#include "dexmoe/checkpoint.hpp"
#include "dexmoe/config.hpp"

namespace dexmoe {

struct SummaryMetrics {
    double s_min = 0.0;
    double s_max = 0.0;
    double low5_mean = 0.0;
    double high5_mean = 0.0;
    double mean = 0.0;
};

// Order statistics over per-object scores: minimum, maximum, mean of the
// five smallest, mean of the five largest, overall mean. Needs five entries.
SummaryMetrics summarize(std::span<const double> s);

struct ObjectEval {
    int object_id = 0;
    int category = 0;
    int episodes = 0;
    double s_mean = 0.0;
    double s_std = 0.0;
    int s_best = 0;
    std::vector<int> per_episode;
};

struct GateTrace {
    int object_id = 0;
    Vec mean_weights;
    std::vector<Vec> episode_weights;
};

struct EvalOptions {
    int episodes = 20;
    uint64_t seed = 0;
    std::string log_dir;  // when set, one trajectory log per episode lands here
    bool collect_gates = false;
};

struct ObjectEvalResult {
    ObjectEval eval;
    GateTrace gates;
};

// Runs mean-action episodes of one object and counts registered successes.
// Pure function of (ensemble, object, config, seed).
ObjectEvalResult evaluate_object(const PolicyEnsemble& ens, const ObjectSpec& obj,
                                 const EnvConfig& env_cfg, double smoothing_alpha,
                                 ForwardMode mode, const EvalOptions& opt);

struct EvalReport {
    std::string split;
    uint64_t config_hash = 0;
    uint64_t seed = 0;
    int episodes_per_object = 0;
    std::vector<ObjectEval> objects;
    SummaryMetrics summary;
    std::vector<int> worst5;
    std::vector<int> best5;
    bool degenerate_five = false;  // exactly five objects, so both tails equal the mean
};

// Evaluates every object in the split ("train" = ids below the split
// boundary, "ood" = the rest) and writes eval_<split>.csv,
// summary_<split>.json, and per-episode trajectory logs under out_dir.
EvalReport run_eval_suite(const CheckpointData& ckpt, const RunConfig& cfg,
                          const std::vector<ObjectSpec>& objects, const std::string& split,
                          const std::string& out_dir, int n_workers);

// Mean routing weights per object from mixture-mode episodes; writes
// gates.csv and projection.csv under out_dir.
std::vector<GateTrace> export_gate_weights(const CheckpointData& ckpt, const RunConfig& cfg,
                                           const std::vector<ObjectSpec>& objects, int episodes,
                                           const std::string& out_dir, int n_workers);

struct Projection2D {
    std::vector<std::array<double, 2>> points;
    bool degenerate = false;  // input had no variance; every point is the origin
};

// Centered PCA onto the top two principal axes. Each axis is signed so that
// its largest-magnitude loading is positive.
Projection2D project_2d(const std::vector<Vec>& vectors);

struct AblationVariant {
    std::string name;
    RunConfig cfg;
    bool completed = false;
    std::string error;
    SummaryMetrics summary;
};

struct AblationResult {
    std::string preset;
    std::vector<AblationVariant> variants;
    bool partial = false;
};

// Presets: "expert_count" sweeps {1, 4, 6, 8} experts, "gate_inputs" sweeps
// the routing view {38, 32, 6}, "router" sweeps {soft, topk(2), switch}.
// Variants branch from shared upstream checkpoints and are each evaluated on
// the training split; results land in ablation.csv and ablation.json.
AblationResult run_ablation(const std::string& preset, const RunConfig& cfg,
                            const std::vector<ObjectSpec>& objects, const std::string& out_dir,
                            int n_workers);

}  // namespace dexmoe
