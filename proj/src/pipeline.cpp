#include "dexmoe/pipeline.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>

namespace dexmoe {

namespace {

constexpr int kProbeUnit = 1000003;

void copy_net(nn::DenseNet& dst, const nn::DenseNet& src) {
    require(dst.layers.size() == src.layers.size(),
            "checkpoint network shape does not match the current config");
    for (size_t i = 0; i < dst.layers.size(); ++i) {
        nn::Layer& d = dst.layers[i];
        const nn::Layer& s = src.layers[i];
        require(d.in == s.in && d.out == s.out,
                "checkpoint network shape does not match the current config");
        d.w = s.w;
        d.b = s.b;
        d.act = s.act;
    }
}

void copy_policy(PolicyNet& dst, const PolicyNet& src) {
    copy_net(dst.net, src.net);
    dst.log_std = src.log_std;
}

double dist2(const Vec& a, const Vec& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

void ensure_dir(const std::string& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    require(!ec, "cannot create output directory: " + out_dir);
}

struct StatsCsv {
    std::ofstream out;

    void open(const std::string& path, bool resume) {
        bool header = true;
        if (resume) {
            std::ifstream probe(path, std::ios::ate | std::ios::binary);
            header = !probe.good() || probe.tellg() == 0;
        }
        out.open(path, resume ? std::ios::app : std::ios::trunc);
        require(out.good(), "cannot write stats file: " + path);
        if (header)
            out << "update,mean_reward,mean_success,approx_kl,lr,policy_loss,value_loss,"
                   "entropy,grad_norm,minibatches,skipped\n";
    }

    void row(int update, double mean_reward, double mean_success, const UpdateStats& st,
             double lr) {
        if (!out.is_open())
            return;
        char buf[512];
        std::snprintf(buf, sizeof buf,
                      "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d,%d\n", update,
                      mean_reward, mean_success, st.approx_kl, lr, st.policy_loss, st.value_loss,
                      st.entropy, st.grad_norm, st.minibatches, st.skipped);
        out << buf;
        out.flush();
    }
};

void write_taxonomy(const std::string& path, const ExpertTaxonomy& tax) {
    nlohmann::json doc;
    doc["n_experts"] = tax.n_experts;
    doc["roles"] = tax.roles;
    doc["names"] = tax.names;
    doc["objects"] = tax.objects_of_expert;
    std::ofstream out(path, std::ios::trunc);
    require(out.good(), "cannot write taxonomy file: " + path);
    out << doc.dump(2) << "\n";
}

void write_probe_scores(const std::string& path,
                        const std::array<double, kNumCategories>& scores) {
    std::ofstream out(path, std::ios::trunc);
    require(out.good(), "cannot write probe scores: " + path);
    out << "category,name,score\n";
    for (int c = 0; c < kNumCategories; ++c) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "%d,%s,%.17g\n", c, category_name(c), scores[c]);
        out << buf;
    }
}

struct UnitRun {
    bool diverged = false;
    std::string error;
    int updates = 0;
};

UnitRun run_unit(Trainer& tr, int budget, int checkpoint_every, const std::string& rolling_path,
                 const std::string& csv_path, CheckpointData& last_good) {
    UnitRun res;
    StatsCsv csv;
    if (tr.update_index() == 0)
        csv.open(csv_path, false);
    else if (tr.update_index() < budget)
        csv.open(csv_path, true);
    last_good = tr.snapshot();
    save_checkpoint(rolling_path, last_good);
    while (tr.update_index() < budget) {
        UpdateStats st;
        try {
            st = tr.step();
        } catch (const std::exception& ex) {
            res.diverged = true;
            res.error = ex.what();
            return res;
        }
        ++res.updates;
        csv.row(tr.update_index(), tr.last_mean_reward(), tr.mean_success(), st, tr.lr());
        if (tr.update_index() % checkpoint_every == 0) {
            last_good = tr.snapshot();
            save_checkpoint(rolling_path, last_good);
        }
    }
    last_good = tr.snapshot();
    save_checkpoint(rolling_path, last_good);
    return res;
}

std::vector<int> train_ids_of(const std::vector<ObjectSpec>& objects) {
    const int train_count = train_split_count(static_cast<int>(objects.size()));
    require(train_count >= 1, "object corpus has no training split");
    std::vector<int> ids(static_cast<size_t>(train_count));
    std::iota(ids.begin(), ids.end(), 0);
    return ids;
}

}  // namespace

void ExpertTaxonomy::validate(const std::vector<ObjectSpec>& objects, int train_count) const {
    require(n_experts == 1 || n_experts == 4 || n_experts == 6 || n_experts == 8,
            "expert count must be 1, 4, 6, or 8");
    require(static_cast<int>(objects_of_expert.size()) == n_experts,
            "taxonomy subsets do not match the expert count");
    require(roles.size() == objects_of_expert.size() && names.size() == objects_of_expert.size(),
            "taxonomy labels do not match the expert count");
    require(train_count >= 1 && train_count <= static_cast<int>(objects.size()),
            "training split out of range");
    std::set<int> covered;
    for (const auto& subset : objects_of_expert) {
        require(!subset.empty(), "an expert has no training objects");
        for (const int id : subset) {
            require(id >= 0 && id < train_count,
                    "taxonomy contains an id outside the training split");
            covered.insert(objects[static_cast<size_t>(id)].category);
        }
    }
    for (int id = 0; id < train_count; ++id) {
        const int cat = objects[static_cast<size_t>(id)].category;
        require(covered.count(cat) > 0,
                std::string("no expert covers category ") + category_name(cat));
    }
}

std::array<std::vector<int>, 2> split_two_clusters(const std::vector<ObjectSpec>& objects,
                                                   const std::vector<int>& ids) {
    require(!ids.empty(), "cannot cluster an empty id list");
    for (const int id : ids)
        require(id >= 0 && id < static_cast<int>(objects.size()), "cluster id out of range");
    auto feat = [&](size_t k) -> const Vec& {
        return objects[static_cast<size_t>(ids[k])].pc_feature;
    };
    if (ids.size() == 1)
        return {std::vector<int>{ids[0]}, std::vector<int>{}};

    size_t ia = 0, ib = 1;
    double best = -1.0;
    for (size_t i = 0; i < ids.size(); ++i)
        for (size_t j = i + 1; j < ids.size(); ++j) {
            const double d = dist2(feat(i), feat(j));
            if (d > best) {
                best = d;
                ia = i;
                ib = j;
            }
        }
    Vec c0 = feat(ia);
    Vec c1 = feat(ib);
    std::vector<int> assign(ids.size(), 0);
    for (int iter = 0; iter < 20; ++iter) {
        std::vector<int> next(ids.size());
        for (size_t k = 0; k < ids.size(); ++k)
            next[k] = dist2(feat(k), c0) <= dist2(feat(k), c1) ? 0 : 1;
        for (const int c : {0, 1}) {
            if (std::count(next.begin(), next.end(), c) == 0) {
                const Vec& other = c == 0 ? c1 : c0;
                size_t far = 0;
                double far_d = -1.0;
                for (size_t k = 0; k < ids.size(); ++k) {
                    const double d = dist2(feat(k), other);
                    if (d > far_d) {
                        far_d = d;
                        far = k;
                    }
                }
                next[far] = c;
            }
        }
        const bool converged = next == assign && iter > 0;
        assign = next;
        const size_t dim = feat(0).size();
        Vec sum0(dim, 0.0), sum1(dim, 0.0);
        int n0 = 0, n1 = 0;
        for (size_t k = 0; k < ids.size(); ++k) {
            Vec& sum = assign[k] == 0 ? sum0 : sum1;
            (assign[k] == 0 ? n0 : n1) += 1;
            for (size_t d = 0; d < dim; ++d)
                sum[d] += feat(k)[d];
        }
        for (size_t d = 0; d < dim; ++d) {
            c0[d] = sum0[d] / n0;
            c1[d] = sum1[d] / n1;
        }
        if (converged)
            break;
    }
    std::array<std::vector<int>, 2> out;
    for (size_t k = 0; k < ids.size(); ++k)
        out[static_cast<size_t>(assign[k])].push_back(ids[k]);
    std::sort(out[0].begin(), out[0].end());
    std::sort(out[1].begin(), out[1].end());
    if (out[0].empty() || (!out[1].empty() && out[1][0] < out[0][0]))
        std::swap(out[0], out[1]);
    return out;
}

std::vector<int> worst_categories(const std::array<double, kNumCategories>& scores, int k) {
    require(k >= 0 && k <= kNumCategories, "worst-category count out of range");
    for (const double s : scores)
        require(std::isfinite(s), "category scores must be finite");
    std::array<int, kNumCategories> idx{};
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int a, int b) { return scores[static_cast<size_t>(a)] <
                                                scores[static_cast<size_t>(b)]; });
    return std::vector<int>(idx.begin(), idx.begin() + k);
}

ExpertTaxonomy build_taxonomy(int n_experts, const std::vector<ObjectSpec>& objects,
                              int train_count,
                              const std::array<double, kNumCategories>* category_scores) {
    require(train_count >= 1 && train_count <= static_cast<int>(objects.size()),
            "training split out of range");
    std::array<std::vector<int>, kNumCategories> by_cat;
    std::vector<int> all;
    for (int id = 0; id < train_count; ++id) {
        const int cat = objects[static_cast<size_t>(id)].category;
        require(cat >= 0 && cat < kNumCategories, "object category out of range");
        by_cat[static_cast<size_t>(cat)].push_back(id);
        all.push_back(id);
    }

    ExpertTaxonomy tax;
    tax.n_experts = n_experts;
    if (n_experts == 1) {
        tax.objects_of_expert = {all};
        tax.roles = {"generalist"};
        tax.names = {"generalist"};
    } else if (n_experts == 6) {
        for (int c = 0; c < kNumCategories; ++c) {
            tax.objects_of_expert.push_back(by_cat[static_cast<size_t>(c)]);
            tax.roles.push_back("specialist");
            tax.names.push_back(category_name(c));
        }
    } else if (n_experts == 4) {
        require(category_scores != nullptr, "the 4-expert layout needs category scores");
        for (const int c : worst_categories(*category_scores, 3)) {
            tax.objects_of_expert.push_back(by_cat[static_cast<size_t>(c)]);
            tax.roles.push_back("specialist");
            tax.names.push_back(category_name(c));
        }
        tax.objects_of_expert.push_back(all);
        tax.roles.push_back("generalist");
        tax.names.push_back("generalist");
    } else if (n_experts == 8) {
        for (int c = 0; c < 4; ++c) {
            tax.objects_of_expert.push_back(by_cat[static_cast<size_t>(c)]);
            tax.roles.push_back("specialist");
            tax.names.push_back(category_name(c));
        }
        for (const int c : {4, 5}) {
            require(by_cat[static_cast<size_t>(c)].size() >= 2,
                    std::string("category ") + category_name(c) +
                        " has too few training objects to split");
            const auto halves = split_two_clusters(objects, by_cat[static_cast<size_t>(c)]);
            for (int half = 0; half < 2; ++half) {
                tax.objects_of_expert.push_back(halves[static_cast<size_t>(half)]);
                tax.roles.push_back("specialist");
                tax.names.push_back(std::string(category_name(c)) + (half == 0 ? "_a" : "_b"));
            }
        }
    } else {
        require(false, "expert count must be 1, 4, 6, or 8");
    }
    tax.validate(objects, train_count);
    return tax;
}

uint64_t stage_seed(uint64_t seed, Stage stage, int unit) {
    uint64_t h = 0xcbf29ce484222325ULL;
    h = fnv1a(&seed, sizeof seed, h);
    const uint64_t s = static_cast<uint64_t>(stage);
    h = fnv1a(&s, sizeof s, h);
    const uint64_t u = static_cast<uint64_t>(unit);
    h = fnv1a(&u, sizeof u, h);
    return h;
}

std::vector<int> round_robin_envs(int n_envs, const std::vector<int>& subset) {
    require(n_envs >= 1, "need at least one env");
    require(!subset.empty(), "cannot assign envs from an empty object subset");
    std::vector<int> out(static_cast<size_t>(n_envs));
    for (int e = 0; e < n_envs; ++e)
        out[static_cast<size_t>(e)] = subset[static_cast<size_t>(e) % subset.size()];
    return out;
}

std::array<double, kNumCategories> probe_category_scores(const PolicyEnsemble& ens,
                                                         const std::vector<ObjectSpec>& objects,
                                                         const RunConfig& cfg, int n_workers) {
    const int train_count = train_split_count(static_cast<int>(objects.size()));
    std::array<std::vector<int>, kNumCategories> by_cat;
    for (int id = 0; id < train_count; ++id)
        by_cat[static_cast<size_t>(objects[static_cast<size_t>(id)].category)].push_back(id);

    std::vector<int> env_objects;
    std::vector<int> env_cat;
    for (int c = 0; c < kNumCategories; ++c) {
        const auto& ids = by_cat[static_cast<size_t>(c)];
        require(!ids.empty(),
                std::string("category ") + category_name(c) + " has no training objects to probe");
        const size_t take = std::min<size_t>(ids.size(),
                                             static_cast<size_t>(cfg.probe_objects_per_category));
        for (size_t i = 0; i < take; ++i)
            for (int ep = 0; ep < cfg.probe_episodes; ++ep) {
                env_objects.push_back(ids[i]);
                env_cat.push_back(c);
            }
    }

    EnvRuntime rt = make_runtime(objects, env_objects, env_config(cfg),
                                 stage_seed(cfg.seed, Stage::experts, kProbeUnit), n_workers,
                                 cfg.smoothing_alpha);
    const size_t n = rt.envs.size();
    std::vector<int> outcome(n, -1);
    size_t remaining = n;
    for (int t = 0; t <= cfg.episode_length && remaining > 0; ++t) {
        const BatchStep bs = batch_step(rt, ens, RolloutPolicy::base, {}, false);
        for (size_t e = 0; e < n; ++e) {
            require(bs.errors[e].empty(), "probe env failed: " + bs.errors[e]);
            if (outcome[e] < 0 && bs.transitions[e].done) {
                outcome[e] = bs.transitions[e].success_count;
                --remaining;
            }
        }
    }
    require(remaining == 0, "probe episodes did not terminate");

    std::array<double, kNumCategories> sum{};
    std::array<int, kNumCategories> count{};
    for (size_t e = 0; e < n; ++e) {
        sum[static_cast<size_t>(env_cat[e])] += outcome[e];
        count[static_cast<size_t>(env_cat[e])] += 1;
    }
    std::array<double, kNumCategories> scores{};
    for (int c = 0; c < kNumCategories; ++c)
        scores[static_cast<size_t>(c)] =
            sum[static_cast<size_t>(c)] / count[static_cast<size_t>(c)];
    return scores;
}

Trainer::Trainer(const RunConfig& cfg, const std::vector<ObjectSpec>& objects, Stage stage,
                 int unit, const std::vector<int>& env_objects, PolicyEnsemble ens, int n_workers)
    : cfg_(cfg), stage_(stage), unit_(unit), n_workers_(n_workers), ens_(std::move(ens)) {
    validate_config(cfg_);
    require(n_workers_ >= 1, "worker count must be at least 1");
    require(stage_ == Stage::experts || unit_ == 0, "only the expert stage has units");
    require(static_cast<int>(env_objects.size()) == cfg_.num_envs,
            "env assignment must cover exactly num_envs slots");
    config_hash_ = config_hash(cfg_);
    objects_hash_ = hash_objects(objects);
    rt_ = make_runtime(objects, env_objects, env_config(cfg_),
                       stage_seed(cfg_.seed, stage_, unit_), n_workers_, cfg_.smoothing_alpha);
    train_rng_ = Rng::stream(cfg_.seed, {stream_tag::train, static_cast<uint64_t>(stage_),
                                         static_cast<uint64_t>(unit_)});
    lr_ = cfg_.lr;
    bank_.init_like(ens_);
    finish_setup();
}

Trainer::Trainer(const RunConfig& cfg, const std::vector<ObjectSpec>& objects,
                 const CheckpointData& ck, int n_workers)
    : cfg_(cfg),
      stage_(ck.stage),
      unit_(ck.stage_unit),
      n_workers_(n_workers),
      ens_(ck.ens),
      bank_(ck.bank) {
    validate_config(cfg_);
    require(n_workers_ >= 1, "worker count must be at least 1");
    config_hash_ = config_hash(cfg_);
    objects_hash_ = hash_objects(objects);
    require(ck.config_hash == config_hash_, "checkpoint was trained under a different config");
    require(ck.objects_hash == objects_hash_,
            "checkpoint was trained on a different object corpus");
    require(!ck.envs.empty(), "checkpoint has no env states");
    for (const EnvSlot& slot : ck.envs)
        require(slot.object_index >= 0 && slot.object_index < static_cast<int>(objects.size()),
                "checkpoint env points outside the object corpus");
    require(ck.success_ring.size() <= kSuccessWindow && ck.ring_cursor < kSuccessWindow,
            "checkpoint success window is malformed");
    rt_ = EnvRuntime{objects,       ck.envs,   env_config(cfg_),
                     ck.runtime_seed, n_workers_, ck.smoothing_alpha};
    train_rng_.set_state(ck.train_rng);
    lr_ = ck.lr;
    ring_ = ck.success_ring;
    cursor_ = ck.ring_cursor;
    episodes_ = ck.episodes_completed;
    update_index_ = ck.update_index;
    finish_setup();
}

void Trainer::finish_setup() {
    mask_ = TrainableMask{};
    mask_.experts.assign(static_cast<size_t>(ens_.n_experts()), false);
    switch (stage_) {
        case Stage::base:
            mask_.mu_pc = true;
            mask_.mu_e = true;
            mask_.base = true;
            break;
        case Stage::experts:
            require(unit_ >= 0 && unit_ < ens_.n_experts(), "expert unit out of range");
            mask_.experts[static_cast<size_t>(unit_)] = true;
            break;
        case Stage::gate:
            require(ens_.n_experts() >= 1, "gate training needs at least one expert");
            mask_.gate = true;
            break;
    }
    std::set<int> seen;
    for (const EnvSlot& slot : rt_.envs)
        seen.insert(slot.object_index);
    allowed_.assign(seen.begin(), seen.end());
    require(!allowed_.empty(), "trainer has no env slots");
}

ForwardSpec Trainer::forward_spec() const {
    ForwardSpec spec;
    spec.objects = &rt_.objects;
    switch (stage_) {
        case Stage::base:
            spec.mode = RolloutPolicy::base;
            break;
        case Stage::experts:
            spec.mode = RolloutPolicy::expert;
            spec.expert_of_object.assign(rt_.objects.size(), unit_);
            break;
        case Stage::gate:
            spec.mode = RolloutPolicy::moe;
            break;
    }
    return spec;
}

UpdateStats Trainer::step() {
    const ForwardSpec spec = forward_spec();
    RolloutBatch batch = collect_rollout(rt_, ens_, spec, cfg_.horizon, true);
    for (const int oi : batch.object_index) {
        require(std::binary_search(allowed_.begin(), allowed_.end(), oi),
                "rollout contains object " + std::to_string(oi) + " outside the data filter");
        ++audit_samples_;
    }
    PpoConfig pcfg = ppo_config(cfg_);
    pcfg.lr = lr_;
    pcfg.n_workers = n_workers_;
    const UpdateStats stats = ppo_update(ens_, batch, pcfg, mask_, spec, bank_, train_rng_);
    require(stats.minibatches > 0 && stats.skipped < stats.minibatches &&
                std::isfinite(stats.total_loss),
            "training diverged: no minibatch produced usable gradients");
    lr_ = adaptive_lr(lr_, stats.approx_kl, cfg_.kl_threshold);
    double reward_sum = 0.0;
    for (const double r : batch.reward)
        reward_sum += r;
    last_mean_reward_ = reward_sum / static_cast<double>(batch.reward.size());
    for (const int s : batch.episode_success) {
        if (ring_.size() < kSuccessWindow) {
            ring_.push_back(s);
        } else {
            ring_[cursor_] = s;
            cursor_ = (cursor_ + 1) % kSuccessWindow;
        }
    }
    episodes_ += batch.episode_success.size();
    ++update_index_;
    return stats;
}

CheckpointData Trainer::snapshot() const {
    CheckpointData ck;
    ck.stage = stage_;
    ck.stage_unit = unit_;
    ck.update_index = update_index_;
    ck.config_hash = config_hash_;
    ck.objects_hash = objects_hash_;
    ck.lr = lr_;
    ck.ens = ens_;
    ck.bank = bank_;
    ck.runtime_seed = rt_.seed;
    ck.smoothing_alpha = rt_.smoothing_alpha;
    ck.envs = rt_.envs;
    ck.train_rng = train_rng_.state();
    ck.success_ring = ring_;
    ck.ring_cursor = cursor_;
    ck.episodes_completed = episodes_;
    return ck;
}

double Trainer::mean_success() const {
    if (ring_.empty())
        return std::numeric_limits<double>::quiet_NaN();
    double s = 0.0;
    for (const double v : ring_)
        s += v;
    return s / static_cast<double>(ring_.size());
}

StageResult run_base_stage(const RunConfig& cfg, const std::vector<ObjectSpec>& objects,
                           const CheckpointData* from, const std::string& out_dir,
                           int n_workers) {
    validate_config(cfg);
    ensure_dir(out_dir);
    StageResult res;
    std::optional<Trainer> tr;
    if (from != nullptr) {
        require(from->stage == Stage::base,
                std::string("base stage cannot resume a checkpoint from the ") +
                    stage_name(from->stage) + " stage");
        tr.emplace(cfg, objects, *from, n_workers);
    } else {
        EnsembleConfig ec = ensemble_config(cfg, 0);
        ec.router_mode = RouterMode::soft;
        ec.topk_k = 1;
        tr.emplace(cfg, objects, Stage::base, 0,
                   round_robin_envs(cfg.num_envs, train_ids_of(objects)), make_ensemble(ec),
                   n_workers);
    }
    const UnitRun unit = run_unit(*tr, cfg.base_updates, cfg.checkpoint_every,
                                  out_dir + "/base_last.ckpt", out_dir + "/stats_base.csv",
                                  res.final);
    res.diverged = unit.diverged;
    res.error = unit.error;
    res.updates_run = unit.updates;
    if (!res.diverged) {
        res.final = tr->snapshot();
        save_checkpoint(out_dir + "/base.ckpt", res.final);
    }
    return res;
}

StageResult run_experts_stage(const RunConfig& cfg, const std::vector<ObjectSpec>& objects,
                              const CheckpointData& from, const std::string& out_dir,
                              int n_workers) {
    validate_config(cfg);
    ensure_dir(out_dir);
    require(from.stage == Stage::base || from.stage == Stage::experts,
            std::string("expert stage cannot start from the ") + stage_name(from.stage) +
                " stage");
    require(from.objects_hash == hash_objects(objects),
            "checkpoint was trained on a different object corpus");
    const int train_count = train_split_count(static_cast<int>(objects.size()));

    StageResult res;
    std::array<double, kNumCategories> scores{};
    const std::array<double, kNumCategories>* scores_ptr = nullptr;
    if (cfg.expert_count == 4) {
        scores = probe_category_scores(from.ens, objects, cfg, n_workers);
        write_probe_scores(out_dir + "/probe_scores.csv", scores);
        scores_ptr = &scores;
    }
    res.taxonomy = build_taxonomy(cfg.expert_count, objects, train_count, scores_ptr);
    write_taxonomy(out_dir + "/taxonomy.json", res.taxonomy);

    int start_unit = 0;
    std::optional<Trainer> tr;
    PolicyEnsemble ens;
    if (from.stage == Stage::experts) {
        start_unit = from.stage_unit;
        tr.emplace(cfg, objects, from, n_workers);
    } else {
        ens = make_ensemble(ensemble_config(cfg, cfg.expert_count));
        copy_net(ens.mu_pc, from.ens.mu_pc);
        copy_net(ens.mu_e, from.ens.mu_e);
        copy_policy(ens.base, from.ens.base);
        for (PolicyNet& e : ens.experts)
            copy_policy(e, from.ens.base);
    }
    for (int unit = start_unit; unit < cfg.expert_count; ++unit) {
        if (!tr)
            tr.emplace(cfg, objects, Stage::experts, unit,
                       round_robin_envs(cfg.num_envs,
                                        res.taxonomy.objects_of_expert[static_cast<size_t>(unit)]),
                       std::move(ens), n_workers);
        const UnitRun u = run_unit(*tr, cfg.expert_updates, cfg.checkpoint_every,
                                   out_dir + "/experts_last.ckpt",
                                   out_dir + "/stats_expert_" + std::to_string(unit) + ".csv",
                                   res.final);
        res.updates_run += u.updates;
        if (u.diverged) {
            res.diverged = true;
            res.error = u.error;
            return res;
        }
        res.final = tr->snapshot();
        ens = res.final.ens;
        tr.reset();
    }
    save_checkpoint(out_dir + "/experts.ckpt", res.final);
    return res;
}

StageResult run_gate_stage(const RunConfig& cfg, const std::vector<ObjectSpec>& objects,
                           const CheckpointData& from, const std::string& out_dir,
                           int n_workers) {
    validate_config(cfg);
    ensure_dir(out_dir);
    require(from.stage == Stage::experts || from.stage == Stage::gate,
            std::string("gate stage cannot start from the ") + stage_name(from.stage) +
                " stage");
    require(from.objects_hash == hash_objects(objects),
            "checkpoint was trained on a different object corpus");

    StageResult res;
    std::optional<Trainer> tr;
    if (from.stage == Stage::gate) {
        tr.emplace(cfg, objects, from, n_workers);
    } else {
        require(static_cast<int>(from.ens.experts.size()) == cfg.expert_count,
                "checkpoint expert count does not match the config");
        PolicyEnsemble ens = make_ensemble(ensemble_config(cfg, cfg.expert_count));
        copy_net(ens.mu_pc, from.ens.mu_pc);
        copy_net(ens.mu_e, from.ens.mu_e);
        copy_policy(ens.base, from.ens.base);
        for (size_t i = 0; i < ens.experts.size(); ++i)
            copy_policy(ens.experts[i], from.ens.experts[i]);
        tr.emplace(cfg, objects, Stage::gate, 0,
                   round_robin_envs(cfg.num_envs, train_ids_of(objects)), std::move(ens),
                   n_workers);
    }
    const UnitRun unit = run_unit(*tr, cfg.gate_updates, cfg.checkpoint_every,
                                  out_dir + "/gate_last.ckpt", out_dir + "/stats_gate.csv",
                                  res.final);
    res.diverged = unit.diverged;
    res.error = unit.error;
    res.updates_run = unit.updates;
    if (!res.diverged) {
        res.final = tr->snapshot();
        save_checkpoint(out_dir + "/gate.ckpt", res.final);
    }
    return res;
}

PipelineResult run_full_pipeline(const RunConfig& cfg, const std::vector<ObjectSpec>& objects,
                                 const std::string& out_dir, int n_workers) {
    PipelineResult res;
    res.base = run_base_stage(cfg, objects, nullptr, out_dir, n_workers);
    if (res.base.diverged)
        return res;
    res.experts = run_experts_stage(cfg, objects, res.base.final, out_dir, n_workers);
    if (res.experts.diverged)
        return res;
    res.gate = run_gate_stage(cfg, objects, res.experts.final, out_dir, n_workers);
    res.completed = !res.gate.diverged;
    return res;
}

}  // namespace dexmoe
