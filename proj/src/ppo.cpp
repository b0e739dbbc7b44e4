#include "dexmoe/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <thread>

namespace dexmoe {

namespace {

uint64_t hash_blocks(const std::vector<std::span<const double>>& blocks) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& b : blocks)
        h = fnv1a(b, h);
    return h;
}

uint64_t policy_hash(const PolicyNet& p) {
    auto blocks = nn::param_blocks(p.net);
    blocks.push_back(std::span<const double>(p.log_std));
    return hash_blocks(blocks);
}

std::vector<uint64_t> frozen_hashes(const PolicyEnsemble& ens, const TrainableMask& mask) {
    std::vector<uint64_t> hs;
    if (!mask.mu_pc)
        hs.push_back(hash_blocks(nn::param_blocks(ens.mu_pc)));
    if (!mask.mu_e)
        hs.push_back(hash_blocks(nn::param_blocks(ens.mu_e)));
    if (!mask.base)
        hs.push_back(policy_hash(ens.base));
    for (int i = 0; i < ens.n_experts(); ++i)
        if (!mask.expert(i))
            hs.push_back(policy_hash(ens.experts[static_cast<size_t>(i)]));
    if (ens.n_experts() > 0 && !mask.gate)
        hs.push_back(hash_blocks(nn::param_blocks(ens.gate)));
    return hs;
}

// Everything the backward pass needs from one sample's forward evaluation.
struct SampleWork {
    Vec e_shape, z;
    nn::ForwardCache pc_cache, e_cache, gate_cache;
    std::vector<nn::ForwardCache> caches;
    std::vector<PolicyOutput> outs;
    Vec w;
    Vec mean, ls;
    double value = 0;
    int expert_idx = -1;
};

void eval_sample(const PolicyEnsemble& ens, const RolloutBatch& batch, size_t row,
                 const ForwardSpec& spec, const TrainableMask& mask, SampleWork& wk) {
    const bool need_dx = mask.mu_e || mask.mu_pc;

    if (mask.mu_pc) {
        require(spec.objects != nullptr, "mu_pc training needs the object table");
        const ObjectSpec& obj = (*spec.objects)[static_cast<size_t>(batch.object_index[row])];
        const Vec f = nn::dense_forward(ens.mu_pc, obj.pc_feature, &wk.pc_cache);
        wk.e_shape = f;
        wk.e_shape.resize(static_cast<size_t>(kShapeDim), 0.0);
        wk.e_shape[static_cast<size_t>(kPcEmbedDim + obj.category)] = 1.0;
    } else {
        wk.e_shape = batch.e_shape[row];
    }

    if (need_dx)
        wk.z = encode_privileged(ens.mu_e, batch.e_phys[row], wk.e_shape, &wk.e_cache);
    else
        wk.z = batch.z[row];

    switch (spec.mode) {
        case RolloutPolicy::base: {
            wk.caches.resize(1);
            const bool cache = mask.base || need_dx;
            const PolicyOutput po =
                policy_net_forward(ens.base, batch.obs[row], wk.z, cache ? &wk.caches[0] : nullptr);
            wk.mean = po.mean;
            wk.ls = po.log_std;
            wk.value = po.value;
            break;
        }
        case RolloutPolicy::expert: {
            require(!spec.expert_of_object.empty(), "expert mode needs an object-to-expert map");
            const int obj_idx = batch.object_index[row];
            require(obj_idx >= 0 && obj_idx < static_cast<int>(spec.expert_of_object.size()),
                    "object index outside the expert map");
            wk.expert_idx = spec.expert_of_object[static_cast<size_t>(obj_idx)];
            require(wk.expert_idx >= 0 && wk.expert_idx < ens.n_experts(),
                    "expert index out of range");
            wk.caches.resize(1);
            const bool cache = mask.expert(wk.expert_idx) || need_dx;
            const PolicyOutput po =
                policy_net_forward(ens.experts[static_cast<size_t>(wk.expert_idx)], batch.obs[row],
                                   wk.z, cache ? &wk.caches[0] : nullptr);
            wk.mean = po.mean;
            wk.ls = po.log_std;
            wk.value = po.value;
            break;
        }
        case RolloutPolicy::moe: {
            const size_t n = static_cast<size_t>(ens.n_experts());
            require(n >= 1, "moe mode needs experts");
            Vec logits;
            wk.w = gate_route(ens, gate_view_slice(ens, wk.e_shape), &wk.gate_cache, &logits);
            wk.caches.resize(n);
            wk.outs.resize(n);
            std::vector<Vec> means(n), stds(n), vals(n);
            for (size_t i = 0; i < n; ++i) {
                const bool cache = mask.expert(static_cast<int>(i)) || need_dx;
                wk.outs[i] = policy_net_forward(ens.experts[i], batch.obs[row], wk.z,
                                                cache ? &wk.caches[i] : nullptr);
                means[i] = wk.outs[i].mean;
                stds[i] = wk.outs[i].log_std;
                vals[i] = Vec{wk.outs[i].value};
            }
            wk.mean = aggregate(wk.w, means);
            wk.ls = aggregate(wk.w, stds);
            wk.value = aggregate(wk.w, vals)[0];
            break;
        }
    }
}

void backward_sample(const PolicyEnsemble& ens, const ForwardSpec& spec,
                     const TrainableMask& mask, SampleWork& wk, const Vec& dmean, const Vec& dls,
                     double dvalue, GradSet& g) {
    const bool need_dx = mask.mu_e || mask.mu_pc;
    Vec dz(static_cast<size_t>(kZDim), 0.0);
    Vec d_e_shape(static_cast<size_t>(kShapeDim), 0.0);
    bool have_dz = false;
    bool have_de = false;
    Vec dy(static_cast<size_t>(kPolicyOutDim));
    Vec dx;

    if (spec.mode == RolloutPolicy::moe) {
        const size_t n = wk.outs.size();
        Vec dw(n, 0.0);
        for (size_t i = 0; i < n; ++i) {
            double acc = dvalue * wk.outs[i].value;
            for (int j = 0; j < kNumJoints; ++j)
                acc += dmean[static_cast<size_t>(j)] * wk.outs[i].mean[static_cast<size_t>(j)] +
                       dls[static_cast<size_t>(j)] * wk.outs[i].log_std[static_cast<size_t>(j)];
            dw[i] = acc;
        }
        for (size_t i = 0; i < n; ++i) {
            const bool train_i = mask.expert(static_cast<int>(i));
            if (!train_i && !need_dx)
                continue;
            for (int j = 0; j < kNumJoints; ++j)
                dy[static_cast<size_t>(j)] = wk.w[i] * dmean[static_cast<size_t>(j)];
            dy[static_cast<size_t>(kNumJoints)] = wk.w[i] * dvalue;
            nn::dense_backward(ens.experts[i].net, wk.caches[i], dy,
                               train_i ? &g.experts[i] : nullptr, need_dx ? &dx : nullptr);
            if (train_i)
                for (int j = 0; j < kNumJoints; ++j)
                    g.d_expert_log_std[i][static_cast<size_t>(j)] +=
                        wk.w[i] * dls[static_cast<size_t>(j)];
            if (need_dx) {
                for (int j = 0; j < kZDim; ++j)
                    dz[static_cast<size_t>(j)] += dx[static_cast<size_t>(kObsDim + j)];
                have_dz = true;
            }
        }
        const Vec dlogits = route_backward(wk.w, dw);
        const bool gate_to_pc = mask.mu_pc && ens.gate_view != kNumCategories;
        if (mask.gate || gate_to_pc) {
            Vec dview;
            nn::dense_backward(ens.gate, wk.gate_cache, dlogits, mask.gate ? &g.gate : nullptr,
                               gate_to_pc ? &dview : nullptr);
            if (gate_to_pc) {
                for (size_t j = 0; j < dview.size(); ++j)
                    d_e_shape[j] += dview[j];
                have_de = true;
            }
        }
    } else {
        const bool is_base = spec.mode == RolloutPolicy::base;
        const PolicyNet& net = is_base ? ens.base : ens.experts[static_cast<size_t>(wk.expert_idx)];
        const bool train_net = is_base ? mask.base : mask.expert(wk.expert_idx);
        nn::NetGrads* ng = nullptr;
        Vec* dls_acc = nullptr;
        if (train_net) {
            ng = is_base ? &g.base : &g.experts[static_cast<size_t>(wk.expert_idx)];
            dls_acc = is_base ? &g.d_base_log_std
                              : &g.d_expert_log_std[static_cast<size_t>(wk.expert_idx)];
        }
        if (ng || need_dx) {
            for (int j = 0; j < kNumJoints; ++j)
                dy[static_cast<size_t>(j)] = dmean[static_cast<size_t>(j)];
            dy[static_cast<size_t>(kNumJoints)] = dvalue;
            nn::dense_backward(net.net, wk.caches[0], dy, ng, need_dx ? &dx : nullptr);
            if (need_dx) {
                for (int j = 0; j < kZDim; ++j)
                    dz[static_cast<size_t>(j)] = dx[static_cast<size_t>(kObsDim + j)];
                have_dz = true;
            }
        }
        if (dls_acc)
            for (int j = 0; j < kNumJoints; ++j)
                (*dls_acc)[static_cast<size_t>(j)] += dls[static_cast<size_t>(j)];
    }

    if (need_dx && have_dz) {
        Vec dxe;
        nn::dense_backward(ens.mu_e, wk.e_cache, dz, mask.mu_e ? &g.mu_e : nullptr,
                           mask.mu_pc ? &dxe : nullptr);
        if (mask.mu_pc) {
            for (int j = 0; j < kShapeDim; ++j)
                d_e_shape[static_cast<size_t>(j)] += dxe[static_cast<size_t>(kEPhysDim + j)];
            have_de = true;
        }
    }
    if (mask.mu_pc && have_de) {
        const Vec df(d_e_shape.begin(), d_e_shape.begin() + kPcEmbedDim);
        nn::dense_backward(ens.mu_pc, wk.pc_cache, df, &g.mu_pc, nullptr);
    }
}

double forward_value(const EnvRuntime& rt, const PolicyEnsemble& ens, const ForwardSpec& spec,
                     size_t slot) {
    const EnvSlot& env = rt.envs[slot];
    const ObjectSpec& obj = rt.objects[static_cast<size_t>(env.object_index)];
    const Vec obs = observation(env.state);
    const Vec ep = e_phys(env.state, obj);
    const ShapeDescriptor shape = encode_shape(ens.mu_pc, obj.pc_feature, obj.category);
    const Vec z = encode_privileged(ens.mu_e, ep, shape.e_shape);
    switch (spec.mode) {
        case RolloutPolicy::base:
            return policy_forward(ens, obs, z, ForwardMode::base).value;
        case RolloutPolicy::expert: {
            const int idx = spec.expert_of_object[static_cast<size_t>(env.object_index)];
            require(idx >= 0 && idx < ens.n_experts(), "expert index out of range");
            return policy_net_forward(ens.experts[static_cast<size_t>(idx)], obs, z).value;
        }
        case RolloutPolicy::moe:
            return policy_forward(ens, obs, z, ForwardMode::moe, shape.e_shape).value;
    }
    return 0.0;
}

}  // namespace

void PpoConfig::validate() const {
    require(clip > 0.0, "clip must be positive");
    require(gamma > 0.0 && gamma <= 1.0, "gamma must lie in (0, 1]");
    require(lambda >= 0.0 && lambda <= 1.0, "lambda must lie in [0, 1]");
    require(lr > 0.0, "lr must be positive");
    require(kl_threshold > 0.0, "kl threshold must be positive");
    require(minibatch_size >= 1, "minibatch size must be positive");
    require(epochs >= 1, "epoch count must be positive");
    require(entropy_coef >= 0.0 && value_coef >= 0.0, "loss coefficients must be nonnegative");
    require(max_grad_norm > 0.0, "grad norm limit must be positive");
    require(n_workers >= 1, "worker count must be positive");
}

bool TrainableMask::any() const {
    if (mu_pc || mu_e || base || gate)
        return true;
    for (const bool e : experts)
        if (e)
            return true;
    return false;
}

void GradSet::init_like(const PolicyEnsemble& ens) {
    mu_pc.init_like(ens.mu_pc);
    mu_e.init_like(ens.mu_e);
    base.init_like(ens.base.net);
    gate.init_like(ens.gate);
    experts.resize(static_cast<size_t>(ens.n_experts()));
    d_expert_log_std.assign(static_cast<size_t>(ens.n_experts()),
                            Vec(static_cast<size_t>(kNumJoints), 0.0));
    for (int i = 0; i < ens.n_experts(); ++i)
        experts[static_cast<size_t>(i)].init_like(ens.experts[static_cast<size_t>(i)].net);
    d_base_log_std.assign(static_cast<size_t>(kNumJoints), 0.0);
}

void GradSet::zero() {
    mu_pc.zero();
    mu_e.zero();
    base.zero();
    gate.zero();
    for (auto& e : experts)
        e.zero();
    std::fill(d_base_log_std.begin(), d_base_log_std.end(), 0.0);
    for (auto& v : d_expert_log_std)
        std::fill(v.begin(), v.end(), 0.0);
}

void GradSet::add(const GradSet& other) {
    mu_pc.add(other.mu_pc);
    mu_e.add(other.mu_e);
    base.add(other.base);
    gate.add(other.gate);
    for (size_t i = 0; i < experts.size(); ++i)
        experts[i].add(other.experts[i]);
    for (size_t j = 0; j < d_base_log_std.size(); ++j)
        d_base_log_std[j] += other.d_base_log_std[j];
    for (size_t i = 0; i < d_expert_log_std.size(); ++i)
        for (size_t j = 0; j < d_expert_log_std[i].size(); ++j)
            d_expert_log_std[i][j] += other.d_expert_log_std[i][j];
}

double GradSet::sq_norm(const TrainableMask& mask) const {
    double s = 0.0;
    if (mask.mu_pc)
        s += mu_pc.sq_norm();
    if (mask.mu_e)
        s += mu_e.sq_norm();
    if (mask.base) {
        s += base.sq_norm();
        s += nn::dot(d_base_log_std, d_base_log_std);
    }
    if (mask.gate)
        s += gate.sq_norm();
    for (size_t i = 0; i < experts.size(); ++i)
        if (mask.expert(static_cast<int>(i))) {
            s += experts[i].sq_norm();
            s += nn::dot(d_expert_log_std[i], d_expert_log_std[i]);
        }
    return s;
}

void GradSet::scale(double s) {
    mu_pc.scale(s);
    mu_e.scale(s);
    base.scale(s);
    gate.scale(s);
    for (auto& e : experts)
        e.scale(s);
    for (auto& v : d_base_log_std)
        v *= s;
    for (auto& ls : d_expert_log_std)
        for (auto& v : ls)
            v *= s;
}

std::vector<std::span<double>> policy_param_blocks(PolicyNet& p) {
    auto blocks = nn::param_blocks(p.net);
    blocks.push_back(std::span<double>(p.log_std));
    return blocks;
}

void AdamBank::init_like(PolicyEnsemble& ens) {
    mu_pc.init_like(nn::param_blocks(ens.mu_pc));
    mu_e.init_like(nn::param_blocks(ens.mu_e));
    base.init_like(policy_param_blocks(ens.base));
    gate.init_like(nn::param_blocks(ens.gate));
    experts.resize(static_cast<size_t>(ens.n_experts()));
    for (int i = 0; i < ens.n_experts(); ++i)
        experts[static_cast<size_t>(i)].init_like(
            policy_param_blocks(ens.experts[static_cast<size_t>(i)]));
}

void compute_gae(std::span<const double> rewards, std::span<const double> values,
                 std::span<const uint8_t> dones, std::span<const double> bootstrap, int horizon,
                 int n_envs, double gamma, double lambda, Vec& advantages, Vec& returns) {
    require(horizon >= 1 && n_envs >= 1, "empty batch");
    const size_t total = static_cast<size_t>(horizon) * static_cast<size_t>(n_envs);
    require(rewards.size() == total && values.size() == total && dones.size() == total,
            "batch arrays must be horizon x envs");
    require(bootstrap.size() == static_cast<size_t>(n_envs), "one bootstrap value per env");
    require(gamma > 0.0 && gamma <= 1.0 && lambda >= 0.0 && lambda <= 1.0,
            "discount parameters out of range");

    advantages.assign(total, 0.0);
    returns.assign(total, 0.0);
    for (int e = 0; e < n_envs; ++e) {
        double acc = 0.0;
        for (int t = horizon - 1; t >= 0; --t) {
            const size_t row = static_cast<size_t>(t) * static_cast<size_t>(n_envs) +
                               static_cast<size_t>(e);
            const double next_v =
                t + 1 < horizon
                    ? values[row + static_cast<size_t>(n_envs)]
                    : bootstrap[static_cast<size_t>(e)];
            const double nd = dones[row] ? 0.0 : 1.0;
            const double delta = rewards[row] + gamma * next_v * nd - values[row];
            acc = delta + gamma * lambda * nd * acc;
            advantages[row] = acc;
            returns[row] = acc + values[row];
        }
    }
}

void normalize_advantages(Vec& advantages) {
    require(!advantages.empty(), "cannot normalize an empty advantage vector");
    double mean = 0.0;
    for (const double a : advantages)
        mean += a;
    mean /= static_cast<double>(advantages.size());
    double var = 0.0;
    for (const double a : advantages)
        var += (a - mean) * (a - mean);
    var /= static_cast<double>(advantages.size());
    const double stdev = std::max(std::sqrt(var), 1e-8);
    for (auto& a : advantages)
        a = (a - mean) / stdev;
}

LossTerms ppo_loss(std::span<const double> old_log_prob, std::span<const double> advantages,
                   std::span<const double> returns, std::span<const double> old_values,
                   std::span<const double> new_log_prob, std::span<const double> new_values,
                   std::span<const double> entropies, const PpoConfig& cfg) {
    const size_t m = old_log_prob.size();
    require(m >= 1, "loss needs at least one sample");
    require(advantages.size() == m && returns.size() == m && old_values.size() == m &&
                new_log_prob.size() == m && new_values.size() == m && entropies.size() == m,
            "loss arrays must be congruent");

    LossTerms out;
    double policy_sum = 0.0, value_sum = 0.0, ent_sum = 0.0, kl_sum = 0.0;
    for (size_t s = 0; s < m; ++s) {
        const double ratio = std::exp(new_log_prob[s] - old_log_prob[s]);
        if (!std::isfinite(ratio) || !std::isfinite(new_values[s]) ||
            !std::isfinite(entropies[s]))
            out.finite = false;
        const double t1 = ratio * advantages[s];
        const double t2 = std::clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * advantages[s];
        policy_sum += std::min(t1, t2);
        const double dv = new_values[s] - old_values[s];
        const double v_clip = old_values[s] + std::clamp(dv, -cfg.clip, cfg.clip);
        const double e1 = new_values[s] - returns[s];
        const double e2 = v_clip - returns[s];
        value_sum += std::max(e1 * e1, e2 * e2);
        ent_sum += entropies[s];
        kl_sum += old_log_prob[s] - new_log_prob[s];
    }
    const double inv = 1.0 / static_cast<double>(m);
    out.policy_loss = -policy_sum * inv;
    out.value_loss = value_sum * inv;
    out.entropy = ent_sum * inv;
    out.approx_kl = kl_sum * inv;
    out.total = out.policy_loss + cfg.value_coef * out.value_loss - cfg.entropy_coef * out.entropy;
    if (!std::isfinite(out.total) || !std::isfinite(out.approx_kl))
        out.finite = false;
    return out;
}

double adaptive_lr(double current_lr, double approx_kl, double kl_threshold) {
    require(current_lr > 0.0, "lr must be positive");
    if (approx_kl > 2.0 * kl_threshold)
        return std::max(current_lr * (2.0 / 3.0), 1e-6);
    if (approx_kl < 0.5 * kl_threshold)
        return std::min(current_lr * 1.5, 1e-2);
    return current_lr;
}

RolloutBatch collect_rollout(EnvRuntime& rt, const PolicyEnsemble& ens, const ForwardSpec& spec,
                             int horizon, bool stochastic) {
    require(horizon >= 1, "horizon must be positive");
    const size_t n_envs = rt.envs.size();

    std::vector<int> expert_of_env;
    if (spec.mode == RolloutPolicy::expert) {
        require(!spec.expert_of_object.empty(), "expert mode needs an object-to-expert map");
        expert_of_env.resize(n_envs);
        for (size_t i = 0; i < n_envs; ++i) {
            const int obj = rt.envs[i].object_index;
            require(obj >= 0 && obj < static_cast<int>(spec.expert_of_object.size()),
                    "env object outside the expert map");
            expert_of_env[i] = spec.expert_of_object[static_cast<size_t>(obj)];
        }
    }

    RolloutBatch b;
    b.horizon = horizon;
    b.n_envs = static_cast<int>(n_envs);
    const size_t total = static_cast<size_t>(horizon) * n_envs;
    b.obs.reserve(total);
    b.z.reserve(total);
    b.e_phys.reserve(total);
    b.e_shape.reserve(total);
    b.action.reserve(total);
    b.object_index.reserve(total);
    b.log_prob.reserve(total);
    b.reward.reserve(total);
    b.value.reserve(total);
    b.done.reserve(total);

    for (int t = 0; t < horizon; ++t) {
        const BatchStep bs = batch_step(rt, ens, spec.mode, expert_of_env, stochastic);
        for (size_t e = 0; e < n_envs; ++e) {
            if (!bs.errors[e].empty())
                throw std::runtime_error("env " + std::to_string(e) + " failed during rollout: " +
                                         bs.errors[e]);
            const TransitionRecord& tr = bs.transitions[e];
            b.obs.push_back(tr.obs);
            b.z.push_back(tr.z);
            b.e_phys.push_back(tr.e_phys);
            b.e_shape.push_back(tr.e_shape);
            b.action.push_back(tr.action_raw);
            b.object_index.push_back(tr.object_index);
            b.log_prob.push_back(tr.log_prob);
            b.reward.push_back(tr.reward);
            b.value.push_back(tr.value);
            b.done.push_back(tr.done ? 1 : 0);
            if (tr.done) {
                b.episode_success.push_back(tr.success_count);
                if (tr.dropped)
                    ++b.episodes_dropped;
            }
        }
    }
    b.bootstrap_value.resize(n_envs);
    for (size_t e = 0; e < n_envs; ++e)
        b.bootstrap_value[e] = forward_value(rt, ens, spec, e);
    return b;
}

void prepare_batch(RolloutBatch& batch, double gamma, double lambda) {
    require(batch.size() > 0, "cannot prepare an empty batch");
    require(all_finite(batch.log_prob), "batch log-probs must be finite");
    compute_gae(batch.reward, batch.value, batch.done, batch.bootstrap_value, batch.horizon,
                batch.n_envs, gamma, lambda, batch.advantages, batch.returns);
    normalize_advantages(batch.advantages);
}

MinibatchEval evaluate_minibatch(const PolicyEnsemble& ens, const RolloutBatch& batch,
                                 std::span<const size_t> rows, const PpoConfig& cfg,
                                 const ForwardSpec& spec, const TrainableMask& mask) {
    const size_t m = rows.size();
    require(m >= 1, "minibatch must be non-empty");
    require(batch.advantages.size() == batch.size(), "batch not prepared");

    MinibatchEval out;
    out.new_log_prob.assign(m, 0.0);
    out.new_values.assign(m, 0.0);
    out.entropies.assign(m, 0.0);

    struct Shard {
        GradSet grads;
        bool bad = false;
    };
    std::vector<Shard> shards(kGradShards);
    for (auto& s : shards)
        s.grads.init_like(ens);

    const double inv_m = 1.0 / static_cast<double>(m);
    const size_t chunk = (m + kGradShards - 1) / kGradShards;

    auto run_shard = [&](int si) {
        Shard& shard = shards[static_cast<size_t>(si)];
        const size_t lo = static_cast<size_t>(si) * chunk;
        const size_t hi = std::min(m, lo + chunk);
        SampleWork wk;
        for (size_t p = lo; p < hi; ++p) {
            const size_t row = rows[p];
            eval_sample(ens, batch, row, spec, mask, wk);
            const double lp_new = gaussian_log_prob(wk.mean, wk.ls, batch.action[row]);
            const double ent = gaussian_entropy(wk.ls);
            out.new_log_prob[p] = lp_new;
            out.new_values[p] = wk.value;
            out.entropies[p] = ent;

            const double ratio = std::exp(lp_new - batch.log_prob[row]);
            if (!std::isfinite(ratio) || !std::isfinite(wk.value) || !std::isfinite(ent)) {
                shard.bad = true;
                continue;
            }
            const double adv = batch.advantages[row];
            const double t1 = ratio * adv;
            const double t2 = std::clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv;
            const double dlp = t1 <= t2 ? -inv_m * adv * ratio : 0.0;

            const double dv_raw = wk.value - batch.value[row];
            const double v_clip = batch.value[row] + std::clamp(dv_raw, -cfg.clip, cfg.clip);
            const double e1 = wk.value - batch.returns[row];
            const double e2 = v_clip - batch.returns[row];
            double dvalue;
            if (e1 * e1 >= e2 * e2)
                dvalue = cfg.value_coef * inv_m * 2.0 * e1;
            else
                dvalue = std::fabs(dv_raw) < cfg.clip ? cfg.value_coef * inv_m * 2.0 * e2 : 0.0;

            const double dent = -cfg.entropy_coef * inv_m;
            Vec dmean(static_cast<size_t>(kNumJoints));
            Vec dls(static_cast<size_t>(kNumJoints));
            for (int j = 0; j < kNumJoints; ++j) {
                const size_t js = static_cast<size_t>(j);
                const double sigma = std::exp(wk.ls[js]);
                const double zres = (batch.action[row][js] - wk.mean[js]) / sigma;
                dmean[js] = dlp * zres / sigma;
                dls[js] = dlp * (zres * zres - 1.0) + dent;
            }
            backward_sample(ens, spec, mask, wk, dmean, dls, dvalue, shard.grads);
        }
    };

    const int workers = std::max(1, std::min(cfg.n_workers, kGradShards));
    if (workers <= 1) {
        for (int si = 0; si < kGradShards; ++si)
            run_shard(si);
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w)
            pool.emplace_back([&, w] {
                for (int si = w; si < kGradShards; si += workers)
                    run_shard(si);
            });
        for (auto& t : pool)
            t.join();
    }

    out.grads.init_like(ens);
    bool bad = false;
    for (const auto& s : shards) {
        out.grads.add(s.grads);
        bad = bad || s.bad;
    }
    Vec old_lp(m), adv(m), ret(m), old_v(m);
    for (size_t p = 0; p < m; ++p) {
        old_lp[p] = batch.log_prob[rows[p]];
        adv[p] = batch.advantages[rows[p]];
        ret[p] = batch.returns[rows[p]];
        old_v[p] = batch.value[rows[p]];
    }
    out.loss = ppo_loss(old_lp, adv, ret, old_v, out.new_log_prob, out.new_values, out.entropies,
                        cfg);
    if (bad)
        out.loss.finite = false;
    return out;
}

UpdateStats ppo_update(PolicyEnsemble& ens, RolloutBatch& batch, const PpoConfig& cfg,
                       const TrainableMask& mask, const ForwardSpec& spec, AdamBank& bank,
                       Rng& shuffle_rng) {
    cfg.validate();
    require(batch.size() > 0, "empty batch");
    prepare_batch(batch, cfg.gamma, cfg.lambda);

    const std::vector<uint64_t> before = frozen_hashes(ens, mask);

    nn::AdamConfig acfg;
    acfg.lr = cfg.lr;

    UpdateStats stats;
    double loss_p = 0, loss_v = 0, loss_e = 0, loss_t = 0, kl = 0, gnorm_sum = 0;
    int processed = 0;

    const size_t n = batch.size();
    std::vector<size_t> indices(n);
    for (size_t i = 0; i < n; ++i)
        indices[i] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (size_t i = n - 1; i > 0; --i) {
            const size_t j = static_cast<size_t>(shuffle_rng.uniform_int(i + 1));
            std::swap(indices[i], indices[j]);
        }
        const size_t mb = static_cast<size_t>(cfg.minibatch_size);
        for (size_t lo = 0; lo < n; lo += mb) {
            const size_t hi = std::min(n, lo + mb);
            ++stats.minibatches;
            MinibatchEval eval = evaluate_minibatch(
                ens, batch, std::span<const size_t>(indices).subspan(lo, hi - lo), cfg, spec,
                mask);
            const double sq = eval.grads.sq_norm(mask);
            if (!eval.loss.finite || !std::isfinite(sq)) {
                ++stats.skipped;
                continue;
            }
            const double gnorm = std::sqrt(sq);
            if (gnorm > cfg.max_grad_norm && gnorm > 0.0)
                eval.grads.scale(cfg.max_grad_norm / gnorm);

            auto step = [&](std::vector<std::span<double>> params,
                            std::vector<std::span<const double>> grads, nn::AdamState& st) {
                const bool ok = nn::adam_step(params, grads, st, acfg);
                require(ok, "adam rejected clipped gradients");
            };
            if (mask.mu_pc)
                step(nn::param_blocks(ens.mu_pc), nn::grad_blocks(eval.grads.mu_pc), bank.mu_pc);
            if (mask.mu_e)
                step(nn::param_blocks(ens.mu_e), nn::grad_blocks(eval.grads.mu_e), bank.mu_e);
            if (mask.base) {
                auto grads = nn::grad_blocks(eval.grads.base);
                grads.push_back(std::span<const double>(eval.grads.d_base_log_std));
                step(policy_param_blocks(ens.base), grads, bank.base);
            }
            for (int i = 0; i < ens.n_experts(); ++i)
                if (mask.expert(i)) {
                    auto grads = nn::grad_blocks(eval.grads.experts[static_cast<size_t>(i)]);
                    grads.push_back(std::span<const double>(
                        eval.grads.d_expert_log_std[static_cast<size_t>(i)]));
                    step(policy_param_blocks(ens.experts[static_cast<size_t>(i)]), grads,
                         bank.experts[static_cast<size_t>(i)]);
                }
            if (mask.gate)
                step(nn::param_blocks(ens.gate), nn::grad_blocks(eval.grads.gate), bank.gate);

            loss_p += eval.loss.policy_loss;
            loss_v += eval.loss.value_loss;
            loss_e += eval.loss.entropy;
            loss_t += eval.loss.total;
            kl += eval.loss.approx_kl;
            gnorm_sum += gnorm;
            ++processed;
        }
    }

    const std::vector<uint64_t> after = frozen_hashes(ens, mask);
    require(before == after, "frozen parameters changed during update");

    if (processed > 0) {
        const double inv = 1.0 / processed;
        stats.policy_loss = loss_p * inv;
        stats.value_loss = loss_v * inv;
        stats.entropy = loss_e * inv;
        stats.total_loss = loss_t * inv;
        stats.approx_kl = kl * inv;
        stats.grad_norm = gnorm_sum * inv;
    }
    return stats;
}

}  // namespace dexmoe
