#pragma once

#include "dexmoe/env.hpp"
#include "dexmoe/nncore.hpp"
#include "dexmoe/objects.hpp"
#include "dexmoe/rng.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace dexmoe {

constexpr int kPcEmbedDim = 32;
constexpr int kShapeDim = kPcEmbedDim + kNumCategories;  // 38
constexpr int kZDim = 66;
constexpr int kPolicyInDim = kObsDim + kZDim;  // 132
constexpr int kPolicyOutDim = kNumJoints + 1;  // 11 action means + 1 value tap

struct ShapeDescriptor {
    Vec pc_feature;       // 100
    Vec pc_embedding;     // 32
    Vec category_onehot;  // 6
    Vec e_shape;          // 38
};

enum class RouterMode { soft, topk, one_hot };

// Policy trunk emitting action means plus a value tap, with a
// state-independent learnable log-std alongside.
struct PolicyNet {
    nn::DenseNet net;
    Vec log_std;
};

PolicyNet make_policy_net(std::span<const int> hidden, uint64_t seed, uint64_t tag);

struct PolicyEnsemble {
    nn::DenseNet mu_pc;  // 100 -> 32
    nn::DenseNet mu_e;   // 57 -> 66
    PolicyNet base;
    std::vector<PolicyNet> experts;
    nn::DenseNet gate;  // view -> 64 -> n_experts
    RouterMode router_mode = RouterMode::soft;
    int topk_k = 1;
    int gate_view = kShapeDim;  // 38 full, 32 embedding only, 6 category only

    int n_experts() const { return static_cast<int>(experts.size()); }
};

struct EnsembleConfig {
    std::vector<int> mu_pc_hidden{32, 32, 32};
    std::vector<int> mu_e_hidden{256, 128};
    std::vector<int> policy_hidden{512, 512};
    int gate_hidden = 64;
    int n_experts = 0;
    RouterMode router_mode = RouterMode::soft;
    int topk_k = 1;
    int gate_view = kShapeDim;
    uint64_t seed = 0;
};

PolicyEnsemble make_ensemble(const EnsembleConfig& cfg);

ShapeDescriptor encode_shape(const nn::DenseNet& mu_pc, const Vec& p_t, int category);

Vec encode_privileged(const nn::DenseNet& mu_e, std::span<const double> e_phys,
                      std::span<const double> e_shape, nn::ForwardCache* cache = nullptr);

// Normalized routing weights from raw logits. soft keeps every expert, topk
// keeps the k largest (ties resolved toward the lower index) and renormalizes
// over the kept set, one_hot keeps only the argmax.
Vec route_weights(const Vec& logits, RouterMode mode, int k);

// Gate forward over the configured input view; the input length must equal
// the gate's input width.
Vec gate_route(const PolicyEnsemble& ens, std::span<const double> e_shape_view,
               nn::ForwardCache* cache = nullptr, Vec* logits_out = nullptr);

std::span<const double> gate_view_slice(const PolicyEnsemble& ens,
                                        std::span<const double> e_shape);

// Upstream gradient on routing weights mapped back to gate logits.
Vec route_backward(const Vec& weights, const Vec& d_weights);

Vec aggregate(const Vec& weights, const std::vector<Vec>& outputs);

enum class ForwardMode { base, moe };

struct PolicyOutput {
    Vec mean;     // 11
    Vec log_std;  // 11
    double value = 0;
    Vec gate_weights;  // empty in base mode
};

PolicyOutput policy_net_forward(const PolicyNet& p, std::span<const double> o_t,
                                std::span<const double> z_t,
                                nn::ForwardCache* cache = nullptr);

// e_shape is required in moe mode and ignored in base mode.
PolicyOutput policy_forward(const PolicyEnsemble& ens, std::span<const double> o_t,
                            std::span<const double> z_t, ForwardMode mode,
                            std::span<const double> e_shape = {});

struct ActionSample {
    Vec action;           // clamped to [-1, 1]
    Vec raw;              // unclamped Gaussian draw
    double log_prob = 0;  // density of the unclamped draw
};

ActionSample sample_action(const Vec& mean, const Vec& log_std, Rng& rng);

double gaussian_log_prob(const Vec& mean, const Vec& log_std, const Vec& x);

double gaussian_entropy(const Vec& log_std);

struct SmootherState {
    Vec prev{Vec(kNumJoints, 0.0)};
    double alpha = 0.8;
};

Vec smooth_action(SmootherState& state, const Vec& a_t);

}  // namespace dexmoe
