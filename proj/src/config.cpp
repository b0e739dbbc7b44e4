#include "dexmoe/config.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace dexmoe {

namespace {

using nlohmann::json;

std::string real_text(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void assign_field(RunConfig& cfg, const ConfigField& field, const json& value) {
    const std::string key = field.key;
    std::visit(
        [&](auto member) {
            using T = std::remove_cvref_t<decltype(cfg.*member)>;
            if constexpr (std::is_same_v<T, int>) {
                if (!value.is_number_integer())
                    throw std::runtime_error("config key " + key + " expects an integer");
                cfg.*member = value.get<int>();
            } else if constexpr (std::is_same_v<T, uint64_t>) {
                if (!value.is_number_unsigned() && !value.is_number_integer())
                    throw std::runtime_error("config key " + key + " expects an integer");
                if (value.is_number_integer() && value.get<int64_t>() < 0)
                    throw std::runtime_error("config key " + key + " expects a nonnegative value");
                cfg.*member = value.get<uint64_t>();
            } else if constexpr (std::is_same_v<T, double>) {
                if (!value.is_number())
                    throw std::runtime_error("config key " + key + " expects a number");
                cfg.*member = value.get<double>();
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!value.is_string())
                    throw std::runtime_error("config key " + key + " expects a string");
                cfg.*member = value.get<std::string>();
            } else {
                if (!value.is_array())
                    throw std::runtime_error("config key " + key + " expects an integer array");
                std::vector<int> out;
                for (const auto& item : value) {
                    if (!item.is_number_integer())
                        throw std::runtime_error("config key " + key +
                                                 " expects an integer array");
                    out.push_back(item.get<int>());
                }
                cfg.*member = out;
            }
        },
        field.ref);
}

json field_json(const RunConfig& cfg, const ConfigField& field) {
    return std::visit(
        [&](auto member) -> json {
            using T = std::remove_cvref_t<decltype(cfg.*member)>;
            if constexpr (std::is_same_v<T, std::vector<int>>) {
                return json(cfg.*member);
            } else {
                return json(cfg.*member);
            }
        },
        field.ref);
}

}  // namespace

const std::vector<ConfigField>& config_schema() {
    static const std::vector<ConfigField> schema = {
        {"env.num_envs", &RunConfig::num_envs, "paper"},
        {"env.episode_length", &RunConfig::episode_length, "paper"},
        {"env.smoothing_alpha", &RunConfig::smoothing_alpha, "invented"},
        {"env.success.theta", &RunConfig::success_theta, "paper"},
        {"env.success.tau_q", &RunConfig::success_tau_q, "paper"},
        {"env.success.tau_v", &RunConfig::success_tau_v, "paper"},
        {"env.success.tau_omega", &RunConfig::success_tau_omega, "paper"},
        {"env.success.hold_window", &RunConfig::success_hold_window, "invented"},
        {"env.reward.c_success", &RunConfig::reward_c_success, "paper"},
        {"env.reward.c_dist", &RunConfig::reward_c_dist, "paper"},
        {"env.reward.c_rot", &RunConfig::reward_c_rot, "paper"},
        {"env.reward.c_action", &RunConfig::reward_c_action, "paper"},
        {"env.reward.c_omega", &RunConfig::reward_c_omega, "invented"},
        {"env.reward.omega_clip", &RunConfig::reward_omega_clip, "invented"},
        {"env.reward.epsilon", &RunConfig::reward_epsilon, "invented"},
        {"ppo.horizon", &RunConfig::horizon, "paper"},
        {"ppo.minibatch_size", &RunConfig::minibatch_size, "paper"},
        {"ppo.lr", &RunConfig::lr, "paper"},
        {"ppo.clip", &RunConfig::clip, "paper"},
        {"ppo.kl_threshold", &RunConfig::kl_threshold, "paper"},
        {"ppo.gamma", &RunConfig::gamma, "paper"},
        {"ppo.lambda", &RunConfig::lambda, "paper"},
        {"ppo.epochs", &RunConfig::epochs, "invented"},
        {"ppo.entropy_coef", &RunConfig::entropy_coef, "invented"},
        {"ppo.value_coef", &RunConfig::value_coef, "invented"},
        {"ppo.max_grad_norm", &RunConfig::max_grad_norm, "invented"},
        {"net.mu_pc_hidden", &RunConfig::mu_pc_hidden, "paper"},
        {"net.mu_e_hidden", &RunConfig::mu_e_hidden, "paper"},
        {"net.policy_hidden", &RunConfig::policy_hidden, "paper"},
        {"net.gate_hidden", &RunConfig::gate_hidden, "paper"},
        {"moe.expert_count", &RunConfig::expert_count, "paper"},
        {"moe.router", &RunConfig::router, "paper"},
        {"moe.topk_k", &RunConfig::topk_k, "paper"},
        {"moe.gate_view", &RunConfig::gate_view, "paper"},
        {"objects.count", &RunConfig::object_count, "paper"},
        {"stage.base_updates", &RunConfig::base_updates, "invented"},
        {"stage.expert_updates", &RunConfig::expert_updates, "invented"},
        {"stage.gate_updates", &RunConfig::gate_updates, "invented"},
        {"stage.checkpoint_every", &RunConfig::checkpoint_every, "invented"},
        {"stage.probe_episodes", &RunConfig::probe_episodes, "invented"},
        {"stage.probe_objects_per_category", &RunConfig::probe_objects_per_category, "invented"},
        {"eval.episodes_per_object", &RunConfig::eval_episodes, "invented"},
        {"eval.success.theta", &RunConfig::eval_theta, "paper"},
        {"seed", &RunConfig::seed, "invented"},
    };
    return schema;
}

RunConfig parse_config(const std::string& json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::exception& ex) {
        throw std::runtime_error(std::string("config is not valid json: ") + ex.what());
    }
    if (!doc.is_object())
        throw std::runtime_error("config must be a flat json object");

    RunConfig cfg;
    for (const auto& [key, value] : doc.items()) {
        if (key == "provenance")
            continue;
        const auto& schema = config_schema();
        const auto it = std::find_if(schema.begin(), schema.end(),
                                     [&](const ConfigField& f) { return key == f.key; });
        if (it == schema.end())
            throw std::runtime_error("unknown config key: " + key);
        assign_field(cfg, *it, value);
    }
    validate_config(cfg);
    return cfg;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::runtime_error("cannot open config file: " + path);
    std::ostringstream text;
    text << in.rdbuf();
    return parse_config(text.str());
}

std::string config_value_text(const RunConfig& cfg, const ConfigField& field) {
    return std::visit(
        [&](auto member) -> std::string {
            using T = std::remove_cvref_t<decltype(cfg.*member)>;
            if constexpr (std::is_same_v<T, int>) {
                return std::to_string(cfg.*member);
            } else if constexpr (std::is_same_v<T, uint64_t>) {
                return std::to_string(cfg.*member);
            } else if constexpr (std::is_same_v<T, double>) {
                return real_text(cfg.*member);
            } else if constexpr (std::is_same_v<T, std::string>) {
                return cfg.*member;
            } else {
                std::string out;
                for (size_t i = 0; i < (cfg.*member).size(); ++i) {
                    if (i)
                        out += ",";
                    out += std::to_string((cfg.*member)[i]);
                }
                return out;
            }
        },
        field.ref);
}

std::string config_to_json(const RunConfig& cfg) {
    std::vector<const ConfigField*> fields;
    for (const auto& f : config_schema())
        fields.push_back(&f);
    std::sort(fields.begin(), fields.end(),
              [](const ConfigField* a, const ConfigField* b) {
                  return std::string_view(a->key) < std::string_view(b->key);
              });
    json doc = json::object();
    for (const ConfigField* f : fields)
        doc[f->key] = field_json(cfg, *f);
    return doc.dump(2) + "\n";
}

uint64_t config_hash(const RunConfig& cfg) {
    std::vector<const ConfigField*> fields;
    for (const auto& f : config_schema())
        fields.push_back(&f);
    std::sort(fields.begin(), fields.end(),
              [](const ConfigField* a, const ConfigField* b) {
                  return std::string_view(a->key) < std::string_view(b->key);
              });
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const ConfigField* f : fields) {
        const std::string line = std::string(f->key) + "=" + config_value_text(cfg, *f) + "\n";
        h = fnv1a(line.data(), line.size(), h);
    }
    return h;
}

void validate_config(const RunConfig& cfg) {
    auto bad = [](const std::string& key, const std::string& why) {
        throw std::runtime_error("invalid config value for " + key + ": " + why);
    };
    if (cfg.num_envs < 1)
        bad("env.num_envs", "must be at least 1");
    if (cfg.episode_length < 1)
        bad("env.episode_length", "must be at least 1");
    if (cfg.smoothing_alpha <= 0.0 || cfg.smoothing_alpha > 1.0)
        bad("env.smoothing_alpha", "must lie in (0, 1]");
    if (cfg.success_theta <= 0.0 || cfg.success_tau_q <= 0.0 || cfg.success_tau_v <= 0.0 ||
        cfg.success_tau_omega <= 0.0)
        bad("env.success.theta", "success thresholds must be positive");
    if (cfg.success_hold_window < 1)
        bad("env.success.hold_window", "must be at least 1");
    if (cfg.reward_epsilon <= 0.0)
        bad("env.reward.epsilon", "must be positive");
    if (cfg.horizon < 1)
        bad("ppo.horizon", "must be at least 1");
    if (cfg.minibatch_size < 1)
        bad("ppo.minibatch_size", "must be at least 1");
    if (cfg.lr <= 0.0)
        bad("ppo.lr", "must be positive");
    if (cfg.clip <= 0.0)
        bad("ppo.clip", "must be positive");
    if (cfg.kl_threshold <= 0.0)
        bad("ppo.kl_threshold", "must be positive");
    if (cfg.gamma <= 0.0 || cfg.gamma > 1.0)
        bad("ppo.gamma", "must lie in (0, 1]");
    if (cfg.lambda < 0.0 || cfg.lambda > 1.0)
        bad("ppo.lambda", "must lie in [0, 1]");
    if (cfg.epochs < 1)
        bad("ppo.epochs", "must be at least 1");
    if (cfg.entropy_coef < 0.0 || cfg.value_coef < 0.0)
        bad("ppo.value_coef", "loss coefficients must be nonnegative");
    if (cfg.max_grad_norm <= 0.0)
        bad("ppo.max_grad_norm", "must be positive");
    auto check_hidden = [&](const char* key, const std::vector<int>& h) {
        if (h.empty())
            bad(key, "needs at least one layer");
        for (const int w : h)
            if (w < 1)
                bad(key, "layer widths must be positive");
    };
    check_hidden("net.mu_pc_hidden", cfg.mu_pc_hidden);
    check_hidden("net.mu_e_hidden", cfg.mu_e_hidden);
    check_hidden("net.policy_hidden", cfg.policy_hidden);
    if (cfg.gate_hidden < 1)
        bad("net.gate_hidden", "must be at least 1");
    if (cfg.expert_count != 1 && cfg.expert_count != 4 && cfg.expert_count != 6 &&
        cfg.expert_count != 8)
        bad("moe.expert_count", "must be one of 1, 4, 6, 8");
    if (cfg.router != "soft" && cfg.router != "topk" && cfg.router != "switch")
        bad("moe.router", "must be one of soft, topk, switch");
    if (cfg.topk_k < 1 || cfg.topk_k > cfg.expert_count)
        bad("moe.topk_k", "must lie in [1, moe.expert_count]");
    if (cfg.gate_view != kShapeDim && cfg.gate_view != kPcEmbedDim &&
        cfg.gate_view != kNumCategories)
        bad("moe.gate_view", "must be 38 (full), 32 (embedding), or 6 (category)");
    if (cfg.object_count < 9)
        bad("objects.count", "needs at least 9 so the training split covers every category");
    if (cfg.base_updates < 0 || cfg.expert_updates < 0 || cfg.gate_updates < 0)
        bad("stage.base_updates", "update budgets must be nonnegative");
    if (cfg.checkpoint_every < 1)
        bad("stage.checkpoint_every", "must be at least 1");
    if (cfg.probe_episodes < 1 || cfg.probe_objects_per_category < 1)
        bad("stage.probe_episodes", "probe settings must be at least 1");
    if (cfg.eval_episodes < 1)
        bad("eval.episodes_per_object", "must be at least 1");
    if (cfg.eval_theta <= 0.0)
        bad("eval.success.theta", "must be positive");
}

EnvConfig env_config(const RunConfig& cfg) {
    EnvConfig out;
    out.episode_length = cfg.episode_length;
    out.success.tau_theta = cfg.success_theta;
    out.success.tau_q = cfg.success_tau_q;
    out.success.tau_v = cfg.success_tau_v;
    out.success.tau_omega = cfg.success_tau_omega;
    out.success.hold_window = cfg.success_hold_window;
    out.reward.c_success = cfg.reward_c_success;
    out.reward.c_dist = cfg.reward_c_dist;
    out.reward.c_rot = cfg.reward_c_rot;
    out.reward.c_action = cfg.reward_c_action;
    out.reward.c_omega = cfg.reward_c_omega;
    out.reward.omega_clip = cfg.reward_omega_clip;
    out.reward.eps = cfg.reward_epsilon;
    return out;
}

SuccessThresholds eval_thresholds(const RunConfig& cfg) {
    SuccessThresholds th;
    th.tau_theta = cfg.eval_theta;
    th.tau_q = cfg.success_tau_q;
    th.tau_v = cfg.success_tau_v;
    th.tau_omega = cfg.success_tau_omega;
    th.hold_window = cfg.success_hold_window;
    return th;
}

PpoConfig ppo_config(const RunConfig& cfg) {
    PpoConfig out;
    out.clip = cfg.clip;
    out.gamma = cfg.gamma;
    out.lambda = cfg.lambda;
    out.lr = cfg.lr;
    out.kl_threshold = cfg.kl_threshold;
    out.minibatch_size = cfg.minibatch_size;
    out.epochs = cfg.epochs;
    out.entropy_coef = cfg.entropy_coef;
    out.value_coef = cfg.value_coef;
    out.max_grad_norm = cfg.max_grad_norm;
    return out;
}

EnsembleConfig ensemble_config(const RunConfig& cfg, int n_experts) {
    EnsembleConfig out;
    out.mu_pc_hidden = cfg.mu_pc_hidden;
    out.mu_e_hidden = cfg.mu_e_hidden;
    out.policy_hidden = cfg.policy_hidden;
    out.gate_hidden = cfg.gate_hidden;
    out.n_experts = n_experts;
    out.router_mode = router_from_text(cfg.router);
    out.topk_k = cfg.topk_k;
    out.gate_view = cfg.gate_view;
    out.seed = cfg.seed;
    return out;
}

RouterMode router_from_text(const std::string& name) {
    if (name == "soft")
        return RouterMode::soft;
    if (name == "topk")
        return RouterMode::topk;
    if (name == "switch")
        return RouterMode::one_hot;
    throw std::runtime_error("unknown router mode: " + name);
}

}  // namespace dexmoe
