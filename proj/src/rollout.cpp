#include "dexmoe/rollout.hpp"

#include <algorithm>
#include <stdexcept>
#include <thread>

namespace dexmoe {

namespace {

void step_one(EnvRuntime& rt, const PolicyEnsemble& ens, RolloutPolicy mode,
              const std::vector<int>& expert_of_env, bool stochastic, size_t slot,
              TransitionRecord& out) {
    EnvSlot& env = rt.envs[slot];
    const ObjectSpec& obj = rt.objects[static_cast<size_t>(env.object_index)];

    out.obs = observation(env.state);
    out.e_phys = e_phys(env.state, obj);
    out.object_index = env.object_index;
    out.env_id = env.env_id;

    const ShapeDescriptor shape = encode_shape(ens.mu_pc, obj.pc_feature, obj.category);
    const Vec z = encode_privileged(ens.mu_e, out.e_phys, shape.e_shape);
    out.e_shape = shape.e_shape;
    out.z = z;

    PolicyOutput po;
    switch (mode) {
        case RolloutPolicy::base:
            po = policy_forward(ens, out.obs, z, ForwardMode::base);
            break;
        case RolloutPolicy::expert: {
            require(expert_of_env.size() == rt.envs.size(),
                    "expert mode needs one expert index per env");
            const int idx = expert_of_env[slot];
            require(idx >= 0 && idx < ens.n_experts(), "expert index out of range");
            po = policy_net_forward(ens.experts[static_cast<size_t>(idx)], out.obs, z);
            break;
        }
        case RolloutPolicy::moe:
            po = policy_forward(ens, out.obs, z, ForwardMode::moe, shape.e_shape);
            break;
    }

    if (stochastic) {
        const ActionSample s = sample_action(po.mean, po.log_std, env.rng);
        out.action_raw = s.raw;
        out.log_prob = s.log_prob;
        out.action_exec = smooth_action(env.smoother, s.action);
    } else {
        out.action_raw = po.mean;
        out.log_prob = gaussian_log_prob(po.mean, po.log_std, po.mean);
        Vec clamped(po.mean.size());
        for (size_t j = 0; j < po.mean.size(); ++j)
            clamped[j] = std::clamp(po.mean[j], -1.0, 1.0);
        out.action_exec = smooth_action(env.smoother, clamped);
    }
    out.value = po.value;

    const StepResult r = env_step(env.state, obj, rt.cfg, out.action_exec, env.rng);
    out.reward = r.reward.total;
    out.done = r.terminal;
    out.dropped = r.dropped;
    out.reached = r.reached;
    out.success_count = env.state.success_count;
    out.dtheta = r.dtheta;

    if (r.terminal)
        reset_slot(rt, slot);
}

}  // namespace

EnvRuntime make_runtime(std::vector<ObjectSpec> objects, const std::vector<int>& object_of_env,
                        const EnvConfig& cfg, uint64_t seed, int n_workers,
                        double smoothing_alpha) {
    require(!objects.empty(), "runtime needs at least one object");
    require(!object_of_env.empty(), "runtime needs at least one env");
    require(n_workers >= 1, "worker count must be positive");
    require(smoothing_alpha >= 0.0 && smoothing_alpha <= 1.0, "alpha must lie in [0, 1]");

    EnvRuntime rt;
    rt.objects = std::move(objects);
    rt.cfg = cfg;
    rt.seed = seed;
    rt.n_workers = n_workers;
    rt.smoothing_alpha = smoothing_alpha;
    rt.envs.resize(object_of_env.size());
    for (size_t i = 0; i < object_of_env.size(); ++i) {
        const int obj = object_of_env[i];
        require(obj >= 0 && obj < static_cast<int>(rt.objects.size()),
                "object index out of range");
        rt.envs[i].env_id = static_cast<uint64_t>(i);
        rt.envs[i].object_index = obj;
        rt.envs[i].rng = Rng::stream(seed, {stream_tag::env, static_cast<uint64_t>(i)});
        reset_slot(rt, i);
    }
    return rt;
}

void reset_slot(EnvRuntime& rt, size_t slot) {
    EnvSlot& env = rt.envs[slot];
    env.state = env_reset(rt.objects[static_cast<size_t>(env.object_index)], rt.cfg, env.rng);
    env.smoother.prev.assign(kNumJoints, 0.0);
    env.smoother.alpha = rt.smoothing_alpha;
}

bool BatchStep::all_ok() const {
    for (const auto& e : errors)
        if (!e.empty())
            return false;
    return true;
}

BatchStep batch_step(EnvRuntime& rt, const PolicyEnsemble& ens, RolloutPolicy mode,
                     const std::vector<int>& expert_of_env, bool stochastic) {
    const size_t n = rt.envs.size();
    BatchStep out;
    out.transitions.resize(n);
    out.errors.assign(n, std::string());

    auto run_range = [&](size_t lo, size_t hi) {
        for (size_t i = lo; i < hi; ++i) {
            try {
                step_one(rt, ens, mode, expert_of_env, stochastic, i, out.transitions[i]);
            } catch (const std::exception& e) {
                out.errors[i] = e.what();
            }
        }
    };

    const int workers = std::min<int>(rt.n_workers, static_cast<int>(n));
    if (workers <= 1) {
        run_range(0, n);
        return out;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    const size_t chunk = (n + static_cast<size_t>(workers) - 1) / static_cast<size_t>(workers);
    for (int w = 0; w < workers; ++w) {
        const size_t lo = static_cast<size_t>(w) * chunk;
        const size_t hi = std::min(n, lo + chunk);
        if (lo >= hi)
            break;
        pool.emplace_back(run_range, lo, hi);
    }
    for (auto& t : pool)
        t.join();
    return out;
}

}  // namespace dexmoe
