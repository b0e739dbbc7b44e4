#include "dexmoe/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "dexmoe/pipeline.hpp"

namespace dexmoe {

namespace {

std::string real_text(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    require(!ec, "cannot create directory: " + dir);
}

std::vector<size_t> rank_by_value(std::span<const double> s) {
    std::vector<size_t> order(s.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return s[a] < s[b]; });
    return order;
}

// Contiguous shards, one thread each; any failure is reported once.
void parallel_over(size_t count, int n_workers, const std::function<void(size_t)>& work) {
    require(n_workers >= 1, "worker count must be positive");
    const size_t per = (count + static_cast<size_t>(n_workers) - 1) /
                       static_cast<size_t>(n_workers);
    std::mutex err_mutex;
    std::string first_error;
    std::vector<std::thread> pool;
    for (int w = 0; w < n_workers; ++w) {
        const size_t lo = static_cast<size_t>(w) * per;
        const size_t hi = std::min(count, lo + per);
        if (lo >= hi)
            break;
        pool.emplace_back([&, lo, hi] {
            for (size_t i = lo; i < hi; ++i) {
                try {
                    work(i);
                } catch (const std::exception& e) {
                    const std::lock_guard<std::mutex> lock(err_mutex);
                    if (first_error.empty())
                        first_error = e.what();
                }
            }
        });
    }
    for (std::thread& t : pool)
        t.join();
    require(first_error.empty(), "evaluation failed: " + first_error);
}

ForwardMode eval_mode(const CheckpointData& ckpt) {
    switch (ckpt.stage) {
        case Stage::base:
            return ForwardMode::base;
        case Stage::gate:
            return ForwardMode::moe;
        case Stage::experts:
            break;
    }
    throw std::invalid_argument(
        "an expert-stage checkpoint has no single policy to evaluate; "
        "use the base or gate checkpoint");
}

std::vector<int> split_ids(const std::vector<ObjectSpec>& objects, const std::string& split) {
    const int total = static_cast<int>(objects.size());
    const int boundary = train_split_count(total);
    std::vector<int> ids;
    if (split == "train") {
        for (int id = 0; id < boundary; ++id)
            ids.push_back(id);
    } else if (split == "ood") {
        for (int id = boundary; id < total; ++id)
            ids.push_back(id);
    } else {
        throw std::invalid_argument("unknown eval split: " + split);
    }
    require(ids.size() >= 5, "the " + split + " split needs at least five objects");
    return ids;
}

std::string report_csv(const EvalReport& rep) {
    std::ostringstream out;
    out << "object_id,category,episodes,s_mean,s_std,s_best\n";
    for (const ObjectEval& o : rep.objects)
        out << o.object_id << ',' << o.category << ',' << o.episodes << ','
            << real_text(o.s_mean) << ',' << real_text(o.s_std) << ',' << o.s_best << '\n';
    return out.str();
}

std::string report_json(const EvalReport& rep) {
    nlohmann::json j;
    j["split"] = rep.split;
    j["config_hash"] = rep.config_hash;
    j["seed"] = rep.seed;
    j["episodes_per_object"] = rep.episodes_per_object;
    j["object_count"] = rep.objects.size();
    j["s_min"] = rep.summary.s_min;
    j["s_low5"] = rep.summary.low5_mean;
    j["s_mean"] = rep.summary.mean;
    j["s_high5"] = rep.summary.high5_mean;
    j["s_max"] = rep.summary.s_max;
    j["worst5"] = rep.worst5;
    j["best5"] = rep.best5;
    j["degenerate_five"] = rep.degenerate_five;
    return j.dump(2) + "\n";
}

SummaryMetrics nan_summary() {
    const double nan = std::nan("");
    return SummaryMetrics{nan, nan, nan, nan, nan};
}

StageResult train_variant_tail(const RunConfig& vcfg, const std::vector<ObjectSpec>& objects,
                               const CheckpointData& shared_base, bool shared_experts,
                               const CheckpointData& experts_final, const std::string& dir,
                               int n_workers, StageResult* experts_out) {
    if (shared_experts)
        return run_gate_stage(vcfg, objects, experts_final, dir, n_workers);
    StageResult experts = run_experts_stage(vcfg, objects, shared_base, dir, n_workers);
    if (experts_out != nullptr)
        *experts_out = experts;
    if (experts.diverged) {
        StageResult gate;
        gate.diverged = true;
        gate.error = experts.error;
        return gate;
    }
    return run_gate_stage(vcfg, objects, experts.final, dir, n_workers);
}

std::string ablation_csv(const AblationResult& res) {
    std::ostringstream out;
    out << "variant,status,s_min,s_low5,s_mean,s_high5,s_max\n";
    for (const AblationVariant& v : res.variants) {
        out << v.name << ',' << (v.completed ? "ok" : "diverged");
        if (v.completed)
            out << ',' << real_text(v.summary.s_min) << ',' << real_text(v.summary.low5_mean)
                << ',' << real_text(v.summary.mean) << ',' << real_text(v.summary.high5_mean)
                << ',' << real_text(v.summary.s_max);
        else
            out << ",,,,,";
        out << '\n';
    }
    return out.str();
}

std::string ablation_json(const AblationResult& res) {
    nlohmann::json j;
    j["preset"] = res.preset;
    j["partial"] = res.partial;
    nlohmann::json rows = nlohmann::json::array();
    for (const AblationVariant& v : res.variants) {
        nlohmann::json row;
        row["name"] = v.name;
        row["status"] = v.completed ? "ok" : "diverged";
        row["error"] = v.error;
        row["config_hash"] = config_hash(v.cfg);
        if (v.completed) {
            row["s_min"] = v.summary.s_min;
            row["s_low5"] = v.summary.low5_mean;
            row["s_mean"] = v.summary.mean;
            row["s_high5"] = v.summary.high5_mean;
            row["s_max"] = v.summary.s_max;
        }
        rows.push_back(row);
    }
    j["variants"] = rows;
    return j.dump(2) + "\n";
}

}  // namespace

SummaryMetrics summarize(std::span<const double> s) {
    require(s.size() >= 5, "summary metrics need at least five scores");
    for (const double v : s)
        require(std::isfinite(v), "summary metrics need finite scores");
    const std::vector<size_t> order = rank_by_value(s);
    SummaryMetrics m;
    m.s_min = s[order.front()];
    m.s_max = s[order.back()];
    double low = 0.0, high = 0.0, all = 0.0;
    for (size_t i = 0; i < 5; ++i) {
        low += s[order[i]];
        high += s[order[order.size() - 1 - i]];
    }
    for (const double v : s)
        all += v;
    m.low5_mean = low / 5.0;
    m.high5_mean = high / 5.0;
    m.mean = all / static_cast<double>(s.size());
    return m;
}

ObjectEvalResult evaluate_object(const PolicyEnsemble& ens, const ObjectSpec& obj,
                                 const EnvConfig& env_cfg, double smoothing_alpha,
                                 ForwardMode mode, const EvalOptions& opt) {
    require(opt.episodes >= 1, "evaluation needs at least one episode");
    require(!opt.collect_gates || mode == ForwardMode::moe, "gate traces need mixture mode");
    if (!opt.log_dir.empty())
        ensure_dir(opt.log_dir);

    ObjectEvalResult res;
    res.eval.object_id = obj.id;
    res.eval.category = obj.category;
    res.eval.episodes = opt.episodes;
    res.gates.object_id = obj.id;
    Vec all_gates;
    uint64_t all_steps = 0;

    for (int ep = 0; ep < opt.episodes; ++ep) {
        Rng rng = Rng::stream(opt.seed, {stream_tag::eval, static_cast<uint64_t>(obj.id),
                                         static_cast<uint64_t>(ep)});
        EnvState st = env_reset(obj, env_cfg, rng);
        SmootherState smoother;
        smoother.alpha = smoothing_alpha;
        TrajectoryRecorder rec;
        rec.thresholds = env_cfg.success;
        rec.object_id = static_cast<uint32_t>(obj.id);
        TrajectoryRecorder* rec_ptr = opt.log_dir.empty() ? nullptr : &rec;

        Vec ep_gates;
        uint64_t ep_steps = 0;
        bool done = false;
        for (int t = 0; t <= env_cfg.episode_length && !done; ++t) {
            const Vec obs = observation(st);
            const Vec phys = e_phys(st, obj);
            const ShapeDescriptor shape = encode_shape(ens.mu_pc, obj.pc_feature, obj.category);
            const Vec z = encode_privileged(ens.mu_e, phys, shape.e_shape);
            const PolicyOutput po = mode == ForwardMode::base
                                        ? policy_forward(ens, obs, z, ForwardMode::base)
                                        : policy_forward(ens, obs, z, ForwardMode::moe,
                                                         shape.e_shape);
            if (opt.collect_gates) {
                if (ep_gates.empty())
                    ep_gates.assign(po.gate_weights.size(), 0.0);
                if (all_gates.empty())
                    all_gates.assign(po.gate_weights.size(), 0.0);
                for (size_t i = 0; i < po.gate_weights.size(); ++i) {
                    ep_gates[i] += po.gate_weights[i];
                    all_gates[i] += po.gate_weights[i];
                }
                ++ep_steps;
                ++all_steps;
            }
            Vec clamped(po.mean.size());
            for (size_t j = 0; j < po.mean.size(); ++j)
                clamped[j] = std::clamp(po.mean[j], -1.0, 1.0);
            const Vec a_exec = smooth_action(smoother, clamped);
            const StepResult r = env_step(st, obj, env_cfg, a_exec, rng, rec_ptr);
            done = r.terminal;
        }
        require(done, "evaluation episode did not terminate");

        res.eval.per_episode.push_back(st.success_count);
        if (rec_ptr != nullptr)
            write_trajectory_log(opt.log_dir + "/traj_" + std::to_string(obj.id) + "_" +
                                     std::to_string(ep) + ".bin",
                                 rec);
        if (opt.collect_gates) {
            for (double& g : ep_gates)
                g /= static_cast<double>(ep_steps);
            res.gates.episode_weights.push_back(std::move(ep_gates));
        }
    }

    double mean = 0.0;
    int best = 0;
    for (const int s : res.eval.per_episode) {
        mean += s;
        best = std::max(best, s);
    }
    mean /= static_cast<double>(opt.episodes);
    double var = 0.0;
    for (const int s : res.eval.per_episode)
        var += (s - mean) * (s - mean);
    res.eval.s_mean = mean;
    res.eval.s_std = std::sqrt(var / static_cast<double>(opt.episodes));
    res.eval.s_best = best;
    if (opt.collect_gates) {
        for (double& g : all_gates)
            g /= static_cast<double>(all_steps);
        res.gates.mean_weights = std::move(all_gates);
    }
    return res;
}

EvalReport run_eval_suite(const CheckpointData& ckpt, const RunConfig& cfg,
                          const std::vector<ObjectSpec>& objects, const std::string& split,
                          const std::string& out_dir, int n_workers) {
    validate_config(cfg);
    require(ckpt.objects_hash == hash_objects(objects),
            "checkpoint was trained on a different object corpus");
    const ForwardMode mode = eval_mode(ckpt);
    const std::vector<int> ids = split_ids(objects, split);
    ensure_dir(out_dir);
    const std::string traj_dir = out_dir + "/trajectories";
    ensure_dir(traj_dir);

    EnvConfig env_cfg = env_config(cfg);
    env_cfg.success = eval_thresholds(cfg);

    EvalReport rep;
    rep.split = split;
    rep.config_hash = config_hash(cfg);
    rep.seed = cfg.seed;
    rep.episodes_per_object = cfg.eval_episodes;
    rep.objects.resize(ids.size());
    parallel_over(ids.size(), n_workers, [&](size_t i) {
        EvalOptions opt;
        opt.episodes = cfg.eval_episodes;
        opt.seed = cfg.seed;
        opt.log_dir = traj_dir;
        rep.objects[i] = evaluate_object(ckpt.ens, objects[static_cast<size_t>(ids[i])],
                                         env_cfg, cfg.smoothing_alpha, mode, opt)
                             .eval;
    });

    std::vector<double> scores(rep.objects.size());
    for (size_t i = 0; i < rep.objects.size(); ++i)
        scores[i] = rep.objects[i].s_mean;
    rep.summary = summarize(scores);
    require(rep.summary.s_min <= rep.summary.low5_mean &&
                rep.summary.low5_mean <= rep.summary.mean &&
                rep.summary.mean <= rep.summary.high5_mean &&
                rep.summary.high5_mean <= rep.summary.s_max,
            "summary metrics violate their ordering");
    const std::vector<size_t> order = rank_by_value(scores);
    for (size_t i = 0; i < 5; ++i) {
        rep.worst5.push_back(rep.objects[order[i]].object_id);
        rep.best5.push_back(rep.objects[order[order.size() - 1 - i]].object_id);
    }
    rep.degenerate_five = ids.size() == 5;

    write_file_atomic(out_dir + "/eval_" + split + ".csv", report_csv(rep));
    write_file_atomic(out_dir + "/summary_" + split + ".json", report_json(rep));
    return rep;
}

std::vector<GateTrace> export_gate_weights(const CheckpointData& ckpt, const RunConfig& cfg,
                                           const std::vector<ObjectSpec>& objects, int episodes,
                                           const std::string& out_dir, int n_workers) {
    validate_config(cfg);
    require(ckpt.ens.n_experts() >= 1, "checkpoint has no expert mixture to trace");
    require(ckpt.objects_hash == hash_objects(objects),
            "checkpoint was trained on a different object corpus");
    require(episodes >= 1, "gate export needs at least one episode");
    ensure_dir(out_dir);

    EnvConfig env_cfg = env_config(cfg);
    env_cfg.success = eval_thresholds(cfg);

    std::vector<GateTrace> traces(objects.size());
    parallel_over(objects.size(), n_workers, [&](size_t i) {
        EvalOptions opt;
        opt.episodes = episodes;
        opt.seed = cfg.seed;
        opt.collect_gates = true;
        traces[i] = evaluate_object(ckpt.ens, objects[i], env_cfg, cfg.smoothing_alpha,
                                    ForwardMode::moe, opt)
                        .gates;
    });

    std::ostringstream csv;
    csv << "object_id";
    for (int e = 1; e <= ckpt.ens.n_experts(); ++e)
        csv << ",w_" << e;
    csv << '\n';
    std::vector<Vec> means;
    for (const GateTrace& tr : traces) {
        csv << tr.object_id;
        for (const double w : tr.mean_weights)
            csv << ',' << real_text(w);
        csv << '\n';
        means.push_back(tr.mean_weights);
    }
    write_file_atomic(out_dir + "/gates.csv", csv.str());

    const Projection2D proj = project_2d(means);
    if (proj.degenerate)
        std::fprintf(stderr, "warning: gate weights have no variance; projection is all zeros\n");
    std::ostringstream pcsv;
    pcsv << "object_id,x,y\n";
    for (size_t i = 0; i < traces.size(); ++i)
        pcsv << traces[i].object_id << ',' << real_text(proj.points[i][0]) << ','
             << real_text(proj.points[i][1]) << '\n';
    write_file_atomic(out_dir + "/projection.csv", pcsv.str());
    return traces;
}

Projection2D project_2d(const std::vector<Vec>& vectors) {
    require(vectors.size() >= 2, "projection needs at least two vectors");
    const size_t n = vectors.front().size();
    require(n >= 1, "projection needs nonempty vectors");
    for (const Vec& v : vectors) {
        require(v.size() == n, "projection vectors must share one dimension");
        for (const double x : v)
            require(std::isfinite(x), "projection input must be finite");
    }
    const double count = static_cast<double>(vectors.size());

    Vec mean(n, 0.0);
    for (const Vec& v : vectors)
        for (size_t j = 0; j < n; ++j)
            mean[j] += v[j];
    for (double& m : mean)
        m /= count;

    std::vector<Vec> centered(vectors.size(), Vec(n, 0.0));
    for (size_t i = 0; i < vectors.size(); ++i)
        for (size_t j = 0; j < n; ++j)
            centered[i][j] = vectors[i][j] - mean[j];

    std::vector<Vec> cov(n, Vec(n, 0.0));
    for (const Vec& row : centered)
        for (size_t a = 0; a < n; ++a)
            for (size_t b = 0; b < n; ++b)
                cov[a][b] += row[a] * row[b] / count;

    Projection2D out;
    out.points.assign(vectors.size(), {0.0, 0.0});
    double total_var = 0.0;
    for (size_t j = 0; j < n; ++j)
        total_var += cov[j][j];
    if (!(total_var > 0.0)) {
        out.degenerate = true;
        return out;
    }

    // Cyclic Jacobi sweeps; plenty for the symmetric matrices seen here.
    std::vector<Vec> evec(n, Vec(n, 0.0));
    for (size_t j = 0; j < n; ++j)
        evec[j][j] = 1.0;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (size_t p = 0; p < n; ++p)
            for (size_t q = p + 1; q < n; ++q)
                off += cov[p][q] * cov[p][q];
        if (off <= 1e-28 * total_var * total_var)
            break;
        for (size_t p = 0; p < n; ++p) {
            for (size_t q = p + 1; q < n; ++q) {
                if (cov[p][q] == 0.0)
                    continue;
                const double theta = 0.5 * std::atan2(2.0 * cov[p][q], cov[q][q] - cov[p][p]);
                const double c = std::cos(theta);
                const double s = std::sin(theta);
                for (size_t j = 0; j < n; ++j) {
                    const double cpj = cov[p][j];
                    const double cqj = cov[q][j];
                    cov[p][j] = c * cpj - s * cqj;
                    cov[q][j] = s * cpj + c * cqj;
                }
                for (size_t j = 0; j < n; ++j) {
                    const double cjp = cov[j][p];
                    const double cjq = cov[j][q];
                    cov[j][p] = c * cjp - s * cjq;
                    cov[j][q] = s * cjp + c * cjq;
                }
                for (size_t j = 0; j < n; ++j) {
                    const double vjp = evec[j][p];
                    const double vjq = evec[j][q];
                    evec[j][p] = c * vjp - s * vjq;
                    evec[j][q] = s * vjp + c * vjq;
                }
            }
        }
    }

    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return cov[a][a] > cov[b][b]; });

    const double lead = std::max(cov[order[0]][order[0]], 0.0);
    for (size_t axis = 0; axis < 2 && axis < n; ++axis) {
        const size_t col = order[axis];
        const double lambda = cov[col][col];
        if (!(lambda > 1e-12 * lead))
            break;
        Vec dir(n);
        for (size_t j = 0; j < n; ++j)
            dir[j] = evec[j][col];
        size_t peak = 0;
        for (size_t j = 1; j < n; ++j)
            if (std::abs(dir[j]) > std::abs(dir[peak]))
                peak = j;
        if (dir[peak] < 0.0)
            for (double& d : dir)
                d = -d;
        for (size_t i = 0; i < centered.size(); ++i) {
            double dot = 0.0;
            for (size_t j = 0; j < n; ++j)
                dot += centered[i][j] * dir[j];
            out.points[i][axis] = dot;
        }
    }
    return out;
}

AblationResult run_ablation(const std::string& preset, const RunConfig& cfg,
                            const std::vector<ObjectSpec>& objects, const std::string& out_dir,
                            int n_workers) {
    validate_config(cfg);
    ensure_dir(out_dir);

    AblationResult res;
    res.preset = preset;
    bool shared_experts = false;
    if (preset == "expert_count") {
        for (const int n : {1, 4, 6, 8}) {
            AblationVariant v;
            v.name = "experts_" + std::to_string(n);
            v.cfg = cfg;
            v.cfg.expert_count = n;
            v.cfg.topk_k = std::min(cfg.topk_k, n);
            v.summary = nan_summary();
            res.variants.push_back(std::move(v));
        }
    } else if (preset == "gate_inputs") {
        shared_experts = true;
        for (const int view : {38, 32, 6}) {
            AblationVariant v;
            v.name = "gate_view_" + std::to_string(view);
            v.cfg = cfg;
            v.cfg.gate_view = view;
            v.summary = nan_summary();
            res.variants.push_back(std::move(v));
        }
    } else if (preset == "router") {
        require(cfg.expert_count >= 2, "the router preset needs at least two experts");
        shared_experts = true;
        for (const char* router : {"soft", "topk", "switch"}) {
            AblationVariant v;
            v.name = std::string(router) == "topk" ? "topk2" : router;
            v.cfg = cfg;
            v.cfg.router = router;
            if (v.cfg.router == "topk")
                v.cfg.topk_k = 2;
            v.summary = nan_summary();
            res.variants.push_back(std::move(v));
        }
    } else {
        throw std::invalid_argument("unknown ablation preset: " + preset +
                                    " (expected expert_count, gate_inputs, or router)");
    }
    for (const AblationVariant& v : res.variants)
        validate_config(v.cfg);

    const std::string shared_dir = out_dir + "/shared";
    const StageResult base = run_base_stage(cfg, objects, nullptr, shared_dir, n_workers);
    StageResult experts;
    if (base.diverged) {
        res.partial = true;
        for (AblationVariant& v : res.variants)
            v.error = base.error;
    } else if (shared_experts) {
        experts = run_experts_stage(cfg, objects, base.final, shared_dir, n_workers);
        if (experts.diverged) {
            res.partial = true;
            for (AblationVariant& v : res.variants)
                v.error = experts.error;
        }
    }

    const bool upstream_ok = !base.diverged && !(shared_experts && experts.diverged);
    if (upstream_ok) {
        for (AblationVariant& v : res.variants) {
            const std::string dir = out_dir + "/" + v.name;
            const StageResult gate = train_variant_tail(v.cfg, objects, base.final,
                                                        shared_experts, experts.final, dir,
                                                        n_workers, nullptr);
            if (gate.diverged) {
                v.error = gate.error;
                res.partial = true;
                continue;
            }
            const EvalReport rep = run_eval_suite(gate.final, v.cfg, objects, "train", dir,
                                                  n_workers);
            v.summary = rep.summary;
            v.completed = true;
        }
    }

    write_file_atomic(out_dir + "/ablation.csv", ablation_csv(res));
    write_file_atomic(out_dir + "/ablation.json", ablation_json(res));
    return res;
}

}  // namespace dexmoe
