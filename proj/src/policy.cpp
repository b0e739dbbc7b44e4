#include "dexmoe/policy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dexmoe {

namespace {

constexpr double kLog2Pi = 1.8378770664093454;

constexpr uint64_t kTagMuPc = 1;
constexpr uint64_t kTagMuE = 2;
constexpr uint64_t kTagBase = 3;
constexpr uint64_t kTagGate = 4;
constexpr uint64_t kTagExpert0 = 16;

Vec concat_input(std::span<const double> o_t, std::span<const double> z_t) {
    require(o_t.size() == kObsDim, "o_t must have length 66");
    require(z_t.size() == kZDim, "z_t must have length 66");
    Vec x(kPolicyInDim);
    std::copy(o_t.begin(), o_t.end(), x.begin());
    std::copy(z_t.begin(), z_t.end(), x.begin() + kObsDim);
    return x;
}

}  // namespace

PolicyNet make_policy_net(std::span<const int> hidden, uint64_t seed, uint64_t tag) {
    PolicyNet p;
    p.net = nn::make_net(kPolicyInDim, hidden, kPolicyOutDim, nn::Act::elu, nn::Act::identity,
                         seed, tag);
    p.log_std.assign(kNumJoints, 0.0);
    return p;
}

PolicyEnsemble make_ensemble(const EnsembleConfig& cfg) {
    require(cfg.n_experts >= 0, "n_experts must be nonnegative");
    require(cfg.gate_view == kShapeDim || cfg.gate_view == kPcEmbedDim ||
                cfg.gate_view == kNumCategories,
            "gate view must be 38, 32, or 6");
    if (cfg.router_mode == RouterMode::topk)
        require(cfg.topk_k >= 1 && cfg.topk_k <= std::max(cfg.n_experts, 1),
                "topk_k out of range");

    PolicyEnsemble ens;
    ens.mu_pc = nn::make_net(kPcFeatureDim, cfg.mu_pc_hidden, kPcEmbedDim, nn::Act::elu,
                             nn::Act::identity, cfg.seed, kTagMuPc);
    ens.mu_e = nn::make_net(kEPhysDim + kShapeDim, cfg.mu_e_hidden, kZDim, nn::Act::elu,
                            nn::Act::identity, cfg.seed, kTagMuE);
    ens.base = make_policy_net(cfg.policy_hidden, cfg.seed, kTagBase);
    for (int i = 0; i < cfg.n_experts; ++i)
        ens.experts.push_back(
            make_policy_net(cfg.policy_hidden, cfg.seed, kTagExpert0 + static_cast<uint64_t>(i)));
    if (cfg.n_experts > 0) {
        const int gh[1] = {cfg.gate_hidden};
        ens.gate = nn::make_net(cfg.gate_view, gh, cfg.n_experts, nn::Act::elu,
                                nn::Act::identity, cfg.seed, kTagGate);
    }
    ens.router_mode = cfg.router_mode;
    ens.topk_k = cfg.topk_k;
    ens.gate_view = cfg.gate_view;
    return ens;
}

ShapeDescriptor encode_shape(const nn::DenseNet& mu_pc, const Vec& p_t, int category) {
    require(category >= 0 && category < kNumCategories, "category out of range");
    require(p_t.size() == kPcFeatureDim, "point-cloud feature must have length 100");
    require(mu_pc.input_dim() == kPcFeatureDim && mu_pc.output_dim() == kPcEmbedDim,
            "mu_pc must map 100 -> 32");

    ShapeDescriptor d;
    d.pc_feature = p_t;
    d.pc_embedding = nn::dense_forward(mu_pc, p_t);
    d.category_onehot.assign(kNumCategories, 0.0);
    d.category_onehot[static_cast<size_t>(category)] = 1.0;
    d.e_shape = d.pc_embedding;
    d.e_shape.insert(d.e_shape.end(), d.category_onehot.begin(), d.category_onehot.end());
    return d;
}

Vec encode_privileged(const nn::DenseNet& mu_e, std::span<const double> e_phys,
                      std::span<const double> e_shape, nn::ForwardCache* cache) {
    require(e_phys.size() == kEPhysDim, "e_phys must have length 19");
    require(e_shape.size() == kShapeDim, "e_shape must have length 38");
    require(mu_e.input_dim() == kEPhysDim + kShapeDim && mu_e.output_dim() == kZDim,
            "mu_e must map 57 -> 66");
    Vec x(kEPhysDim + kShapeDim);
    std::copy(e_phys.begin(), e_phys.end(), x.begin());
    std::copy(e_shape.begin(), e_shape.end(), x.begin() + kEPhysDim);
    return nn::dense_forward(mu_e, x, cache);
}

Vec route_weights(const Vec& logits, RouterMode mode, int k) {
    const int n = static_cast<int>(logits.size());
    require(n >= 1, "routing needs at least one logit");
    require(all_finite(logits), "routing logits must be finite");

    int keep = n;
    if (mode == RouterMode::topk) {
        require(k >= 1 && k <= n, "topk k out of range");
        keep = k;
    } else if (mode == RouterMode::one_hot) {
        keep = 1;
    }

    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return logits[static_cast<size_t>(a)] >
                                                logits[static_cast<size_t>(b)]; });
    order.resize(static_cast<size_t>(keep));
    std::sort(order.begin(), order.end());

    Vec kept_logits(static_cast<size_t>(keep));
    for (int i = 0; i < keep; ++i)
        kept_logits[static_cast<size_t>(i)] = logits[static_cast<size_t>(order[static_cast<size_t>(i)])];
    const Vec kept_weights = nn::softmax(kept_logits);

    Vec w(static_cast<size_t>(n), 0.0);
    for (int i = 0; i < keep; ++i)
        w[static_cast<size_t>(order[static_cast<size_t>(i)])] = kept_weights[static_cast<size_t>(i)];
    return w;
}

std::span<const double> gate_view_slice(const PolicyEnsemble& ens,
                                        std::span<const double> e_shape) {
    require(e_shape.size() == kShapeDim, "e_shape must have length 38");
    if (ens.gate_view == kShapeDim)
        return e_shape;
    if (ens.gate_view == kPcEmbedDim)
        return e_shape.subspan(0, kPcEmbedDim);
    return e_shape.subspan(kPcEmbedDim, kNumCategories);
}

Vec gate_route(const PolicyEnsemble& ens, std::span<const double> e_shape_view,
               nn::ForwardCache* cache, Vec* logits_out) {
    require(ens.n_experts() >= 1, "gate routing needs at least one expert");
    require(static_cast<int>(e_shape_view.size()) == ens.gate.input_dim(),
            "gate input view width mismatch");
    Vec logits = nn::dense_forward(ens.gate, e_shape_view, cache);
    if (logits_out)
        *logits_out = logits;
    return route_weights(logits, ens.router_mode, ens.topk_k);
}

Vec route_backward(const Vec& weights, const Vec& d_weights) {
    require(weights.size() == d_weights.size(), "routing gradient size mismatch");
    double s = 0.0;
    for (size_t i = 0; i < weights.size(); ++i)
        s += weights[i] * d_weights[i];
    Vec dl(weights.size());
    for (size_t i = 0; i < weights.size(); ++i)
        dl[i] = weights[i] * (d_weights[i] - s);
    return dl;
}

Vec aggregate(const Vec& weights, const std::vector<Vec>& outputs) {
    const size_t n = weights.size();
    require(n >= 1 && outputs.size() == n, "weights and outputs must pair up");
    const size_t m = outputs.front().size();
    double sum = 0.0;
    int hot = -1;
    bool one_hot = true;
    for (size_t i = 0; i < n; ++i) {
        require(outputs[i].size() == m, "expert outputs must share a length");
        const double wi = weights[i];
        require(std::isfinite(wi) && wi >= 0.0, "weights must be finite and nonnegative");
        sum += wi;
        if (wi == 1.0 && hot < 0)
            hot = static_cast<int>(i);
        else if (wi != 0.0)
            one_hot = false;
    }
    require(std::fabs(sum - 1.0) <= 1e-9, "weights must sum to 1");
    if (one_hot && hot >= 0)
        return outputs[static_cast<size_t>(hot)];

    Vec y(m, 0.0);
    for (size_t j = 0; j < m; ++j) {
        double acc = 0.0;
        for (size_t i = 0; i < n; ++i)
            acc += weights[i] * outputs[i][j];
        y[j] = acc;
    }
    return y;
}

PolicyOutput policy_net_forward(const PolicyNet& p, std::span<const double> o_t,
                                std::span<const double> z_t, nn::ForwardCache* cache) {
    require(p.net.input_dim() == kPolicyInDim && p.net.output_dim() == kPolicyOutDim,
            "policy net must map 132 -> 12");
    require(p.log_std.size() == kNumJoints, "log_std must have length 11");
    const Vec x = concat_input(o_t, z_t);
    const Vec out = nn::dense_forward(p.net, x, cache);
    PolicyOutput po;
    po.mean.assign(out.begin(), out.begin() + kNumJoints);
    po.value = out[kNumJoints];
    po.log_std = p.log_std;
    return po;
}

PolicyOutput policy_forward(const PolicyEnsemble& ens, std::span<const double> o_t,
                            std::span<const double> z_t, ForwardMode mode,
                            std::span<const double> e_shape) {
    if (mode == ForwardMode::base)
        return policy_net_forward(ens.base, o_t, z_t);

    require(ens.n_experts() >= 1, "moe mode needs at least one expert");
    require(!e_shape.empty(), "moe mode needs e_shape for the gate");
    const Vec w = gate_route(ens, gate_view_slice(ens, e_shape));

    const size_t n = static_cast<size_t>(ens.n_experts());
    std::vector<Vec> means(n), log_stds(n), values(n);
    for (size_t i = 0; i < n; ++i) {
        const PolicyOutput po = policy_net_forward(ens.experts[i], o_t, z_t);
        means[i] = po.mean;
        log_stds[i] = po.log_std;
        values[i] = Vec{po.value};
    }
    PolicyOutput po;
    po.mean = aggregate(w, means);
    po.log_std = aggregate(w, log_stds);
    po.value = aggregate(w, values)[0];
    po.gate_weights = w;
    return po;
}

ActionSample sample_action(const Vec& mean, const Vec& log_std, Rng& rng) {
    require(mean.size() == log_std.size(), "mean and log_std size mismatch");
    require(all_finite(mean) && all_finite(log_std), "policy outputs must be finite");
    const size_t n = mean.size();
    ActionSample s;
    s.raw.resize(n);
    s.action.resize(n);
    for (size_t j = 0; j < n; ++j) {
        const double std_j = std::exp(log_std[j]);
        s.raw[j] = mean[j] + std_j * rng.normal();
        s.action[j] = std::clamp(s.raw[j], -1.0, 1.0);
    }
    s.log_prob = gaussian_log_prob(mean, log_std, s.raw);
    return s;
}

double gaussian_log_prob(const Vec& mean, const Vec& log_std, const Vec& x) {
    const size_t n = mean.size();
    require(log_std.size() == n && x.size() == n, "gaussian dimensions mismatch");
    double acc = -0.5 * static_cast<double>(n) * kLog2Pi;
    for (size_t j = 0; j < n; ++j) {
        const double z = (x[j] - mean[j]) * std::exp(-log_std[j]);
        acc += -0.5 * z * z - log_std[j];
    }
    return acc;
}

double gaussian_entropy(const Vec& log_std) {
    double acc = 0.5 * static_cast<double>(log_std.size()) * (1.0 + kLog2Pi);
    for (const double ls : log_std)
        acc += ls;
    return acc;
}

Vec smooth_action(SmootherState& state, const Vec& a_t) {
    require(state.alpha >= 0.0 && state.alpha <= 1.0, "alpha must lie in [0, 1]");
    require(a_t.size() == state.prev.size(), "action size mismatch");
    Vec out(a_t.size());
    for (size_t j = 0; j < a_t.size(); ++j)
        out[j] = state.alpha * a_t[j] + (1.0 - state.alpha) * state.prev[j];
    state.prev = out;
    return out;
}

}  // namespace dexmoe
