#include "dexmoe/cliapp.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dexmoe/checkpoint.hpp"
#include "dexmoe/config.hpp"
#include "dexmoe/evalkit.hpp"
#include "dexmoe/pipeline.hpp"

namespace dexmoe {

namespace {

constexpr const char* kToolVersion = "0.1.0";

using json = nlohmann::json;

struct Invocation {
    std::string command;
    std::string config_path;
    std::string out;
    std::string from_checkpoint;
    std::string split = "train";
    std::string preset;
    std::string router;
    int topk = 0;
    int episodes = 0;
    int workers = 0;
    uint64_t seed = 0;
    bool seed_from_flag = false;
    std::vector<std::string> logs;
};

std::string real_text(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

uint64_t hash_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "cannot read file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    const std::string bytes = buf.str();
    return fnv1a(bytes.data(), bytes.size());
}

int resolved_workers(int flag_value) {
    if (flag_value > 0)
        return flag_value;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
}

// Precedence: --seed flag, then DEXMOE_SEED, then the config value.
uint64_t resolve_seed(const Invocation& inv, uint64_t config_seed, std::string& source) {
    if (inv.seed_from_flag) {
        source = "flag";
        return inv.seed;
    }
    if (const char* env = std::getenv("DEXMOE_SEED")) {
        const std::string text(env);
        require(!text.empty(), "DEXMOE_SEED is empty");
        for (const char c : text)
            require(std::isdigit(static_cast<unsigned char>(c)) != 0,
                    "DEXMOE_SEED is not an unsigned integer: " + text);
        source = "env";
        return std::strtoull(text.c_str(), nullptr, 10);
    }
    source = "config";
    return config_seed;
}

void write_manifest(const Invocation& inv, const RunConfig* cfg, const std::string& seed_source,
                    const json& inputs, const json& args) {
    json m;
    m["command"] = inv.command;
    if (cfg != nullptr) {
        m["config"] = json::parse(config_to_json(*cfg));
        m["config_hash"] = config_hash(*cfg);
        m["seed"] = cfg->seed;
        m["seed_source"] = seed_source;
    }
    m["inputs"] = inputs;
    if (!args.empty())
        m["args"] = args;
    m["versions"] = {{"tool", kToolVersion},
                     {"checkpoint_format", kCheckpointFormatVersion},
                     {"config_schema", kConfigSchemaVersion}};
    write_file_atomic(inv.out + "/manifest.json", m.dump(2) + "\n");
}

json common_inputs(const Invocation& inv) {
    json in = json::object();
    if (!inv.config_path.empty())
        in["config_file"] = hash_file(inv.config_path);
    return in;
}

int cmd_gen_objects(const Invocation& inv, const RunConfig& cfg,
                    const std::string& seed_source) {
    const auto objects = generate_objects(cfg.object_count, cfg.seed);
    json inputs = common_inputs(inv);
    inputs["objects"] = hash_objects(objects);
    write_manifest(inv, &cfg, seed_source, inputs, json::object());

    write_object_file(inv.out + "/objects.bin", objects, cfg.seed);
    std::ostringstream csv;
    csv << "id,category,category_name,mass,com_x,com_y,com_z,friction,scale,has_jam\n";
    for (const ObjectSpec& o : objects) {
        csv << o.id << ',' << o.category << ',' << category_name(o.category) << ','
            << real_text(o.mass) << ',' << real_text(o.com[0]) << ',' << real_text(o.com[1])
            << ',' << real_text(o.com[2]) << ',' << real_text(o.friction) << ','
            << real_text(o.scale) << ',' << (o.has_jam ? 1 : 0) << '\n';
    }
    write_file_atomic(inv.out + "/objects.csv", csv.str());

    const int train = train_split_count(static_cast<int>(objects.size()));
    std::printf("wrote %zu objects (train %d, ood %zu) to %s/objects.bin\n", objects.size(),
                train, objects.size() - static_cast<size_t>(train), inv.out.c_str());
    return 0;
}

int finish_stage(const StageResult& r, const char* stage, const std::string& out) {
    if (r.diverged) {
        std::fprintf(stderr, "%s stage diverged after %d updates: %s\n", stage, r.updates_run,
                     r.error.c_str());
        return 1;
    }
    std::printf("%s stage complete: %d updates, checkpoint %s/%s.ckpt\n", stage, r.updates_run,
                out.c_str(), stage);
    return 0;
}

int cmd_train_base(const Invocation& inv, const RunConfig& cfg, const std::string& seed_source) {
    const auto objects = generate_objects(cfg.object_count, cfg.seed);
    json inputs = common_inputs(inv);
    inputs["objects"] = hash_objects(objects);
    CheckpointData from;
    const bool resume = !inv.from_checkpoint.empty();
    if (resume) {
        inputs["checkpoint"] = hash_file(inv.from_checkpoint);
        from = load_checkpoint(inv.from_checkpoint);
    }
    write_manifest(inv, &cfg, seed_source, inputs, json::object());
    const StageResult r =
        run_base_stage(cfg, objects, resume ? &from : nullptr, inv.out, inv.workers);
    return finish_stage(r, "base", inv.out);
}

int cmd_train_experts(const Invocation& inv, const RunConfig& cfg,
                      const std::string& seed_source) {
    const auto objects = generate_objects(cfg.object_count, cfg.seed);
    const std::string from_path =
        inv.from_checkpoint.empty() ? inv.out + "/base.ckpt" : inv.from_checkpoint;
    json inputs = common_inputs(inv);
    inputs["objects"] = hash_objects(objects);
    inputs["checkpoint"] = hash_file(from_path);
    const CheckpointData from = load_checkpoint(from_path);
    write_manifest(inv, &cfg, seed_source, inputs, json::object());
    const StageResult r = run_experts_stage(cfg, objects, from, inv.out, inv.workers);
    if (!r.diverged)
        for (size_t i = 0; i < r.taxonomy.names.size(); ++i)
            std::printf("expert %zu: %s\n", i, r.taxonomy.names[i].c_str());
    return finish_stage(r, "experts", inv.out);
}

int cmd_train_gate(const Invocation& inv, const RunConfig& cfg, const std::string& seed_source) {
    const auto objects = generate_objects(cfg.object_count, cfg.seed);
    const std::string from_path =
        inv.from_checkpoint.empty() ? inv.out + "/experts.ckpt" : inv.from_checkpoint;
    json inputs = common_inputs(inv);
    inputs["objects"] = hash_objects(objects);
    inputs["checkpoint"] = hash_file(from_path);
    const CheckpointData from = load_checkpoint(from_path);
    write_manifest(inv, &cfg, seed_source, inputs, json::object());
    const StageResult r = run_gate_stage(cfg, objects, from, inv.out, inv.workers);
    return finish_stage(r, "gate", inv.out);
}

int cmd_eval(const Invocation& inv, const RunConfig& cfg, const std::string& seed_source) {
    const auto objects = generate_objects(cfg.object_count, cfg.seed);
    json inputs = common_inputs(inv);
    inputs["objects"] = hash_objects(objects);
    inputs["checkpoint"] = hash_file(inv.from_checkpoint);
    const CheckpointData ck = load_checkpoint(inv.from_checkpoint);
    write_manifest(inv, &cfg, seed_source, inputs, json{{"split", inv.split}});
    const EvalReport rep = run_eval_suite(ck, cfg, objects, inv.split, inv.out, inv.workers);
    std::printf("%s split, %zu objects, %d episodes each\n", rep.split.c_str(),
                rep.objects.size(), rep.episodes_per_object);
    std::printf("s_min=%s s_low5=%s s_mean=%s s_high5=%s s_max=%s\n",
                real_text(rep.summary.s_min).c_str(), real_text(rep.summary.low5_mean).c_str(),
                real_text(rep.summary.mean).c_str(), real_text(rep.summary.high5_mean).c_str(),
                real_text(rep.summary.s_max).c_str());
    if (rep.degenerate_five)
        std::printf("note: split has exactly five objects; low5 and high5 equal the mean\n");
    return 0;
}

int cmd_ablate(const Invocation& inv, const RunConfig& cfg, const std::string& seed_source) {
    const auto objects = generate_objects(cfg.object_count, cfg.seed);
    json inputs = common_inputs(inv);
    inputs["objects"] = hash_objects(objects);
    write_manifest(inv, &cfg, seed_source, inputs, json{{"preset", inv.preset}});
    const AblationResult res = run_ablation(inv.preset, cfg, objects, inv.out, inv.workers);
    for (const AblationVariant& v : res.variants) {
        if (v.completed)
            std::printf("%s: s_mean=%s s_min=%s\n", v.name.c_str(),
                        real_text(v.summary.mean).c_str(), real_text(v.summary.s_min).c_str());
        else
            std::printf("%s: diverged (%s)\n", v.name.c_str(), v.error.c_str());
    }
    if (res.partial) {
        std::fprintf(stderr, "ablation incomplete: at least one variant diverged\n");
        return 1;
    }
    return 0;
}

int cmd_export_gates(const Invocation& inv, const RunConfig& cfg,
                     const std::string& seed_source) {
    const auto objects = generate_objects(cfg.object_count, cfg.seed);
    const int episodes = inv.episodes > 0 ? inv.episodes : cfg.eval_episodes;
    json inputs = common_inputs(inv);
    inputs["objects"] = hash_objects(objects);
    inputs["checkpoint"] = hash_file(inv.from_checkpoint);
    const CheckpointData ck = load_checkpoint(inv.from_checkpoint);
    write_manifest(inv, &cfg, seed_source, inputs, json{{"episodes", episodes}});
    const auto traces = export_gate_weights(ck, cfg, objects, episodes, inv.out, inv.workers);
    std::printf("wrote gate weights for %zu objects to %s/gates.csv\n", traces.size(),
                inv.out.c_str());
    return 0;
}

std::vector<std::string> collect_logs(const std::vector<std::string>& paths) {
    std::vector<std::string> files;
    for (const std::string& p : paths) {
        if (std::filesystem::is_directory(p)) {
            std::vector<std::string> found;
            for (const auto& e : std::filesystem::recursive_directory_iterator(p))
                if (e.is_regular_file() && e.path().extension() == ".bin")
                    found.push_back(e.path().string());
            std::sort(found.begin(), found.end());
            files.insert(files.end(), found.begin(), found.end());
        } else {
            files.push_back(p);
        }
    }
    require(!files.empty(), "no trajectory logs found under the given paths");
    return files;
}

int cmd_recount(const Invocation& inv) {
    const std::vector<std::string> files = collect_logs(inv.logs);
    json log_hashes = json::object();
    for (const std::string& f : files)
        log_hashes[f] = hash_file(f);
    write_manifest(inv, nullptr, "", json{{"logs", log_hashes}}, json::object());

    std::ostringstream csv;
    csv << "log,object_id,steps,online_successes,recount_successes,status\n";
    int mismatches = 0;
    for (const std::string& f : files) {
        const TrajectoryRecorder rec = read_trajectory_log(f);
        const RecountResult rc = recount_trajectory(rec);
        int online = 0;
        for (const TrajectoryRecord& r : rec.records)
            online += (r.flags & 2u) != 0 ? 1 : 0;
        const bool ok = rc.matches_log && rc.successes == online;
        mismatches += ok ? 0 : 1;
        csv << f << ',' << rec.object_id << ',' << rec.records.size() << ',' << online << ','
            << rc.successes << ',' << (ok ? "ok" : "mismatch") << '\n';
    }
    write_file_atomic(inv.out + "/recount.csv", csv.str());
    if (mismatches > 0) {
        std::fprintf(stderr, "%d of %zu logs disagree with their online success counts\n",
                     mismatches, files.size());
        return 1;
    }
    std::printf("recounted %zu logs: all match their online success counts\n", files.size());
    return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
    Invocation inv;
    CLI::App app{"in-hand reorientation training and evaluation toolkit", "dexmoe"};
    app.require_subcommand(1);

    const auto add_common = [&](CLI::App* sub, bool needs_config) {
        auto* c = sub->add_option("--config", inv.config_path, "run configuration json")
                      ->check(CLI::ExistingFile);
        if (needs_config)
            c->required();
        sub->add_option("--seed", inv.seed, "seed override");
        sub->add_option("--out", inv.out, "output directory")->required();
        sub->add_option("--workers", inv.workers, "parallel workers (default: hardware threads)")
            ->check(CLI::PositiveNumber);
    };

    CLI::App* gen = app.add_subcommand("gen-objects", "generate the object corpus");
    add_common(gen, true);

    CLI::App* base = app.add_subcommand("train-base", "train the base policy on all objects");
    add_common(base, true);
    base->add_option("--from-checkpoint", inv.from_checkpoint, "resume a base checkpoint")
        ->check(CLI::ExistingFile);

    CLI::App* experts =
        app.add_subcommand("train-experts", "fine-tune per-category experts from a base policy");
    add_common(experts, true);
    experts->add_option("--from-checkpoint", inv.from_checkpoint,
                        "base checkpoint (default: <out>/base.ckpt)");

    CLI::App* gate = app.add_subcommand("train-gate", "train the routing network over experts");
    add_common(gate, true);
    gate->add_option("--from-checkpoint", inv.from_checkpoint,
                     "experts checkpoint (default: <out>/experts.ckpt)");
    gate->add_option("--router", inv.router, "routing mode override")
        ->check(CLI::IsMember({"soft", "topk", "switch"}));
    gate->add_option("--topk", inv.topk, "active experts for topk routing")
        ->check(CLI::PositiveNumber);

    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint over an object split");
    add_common(ev, true);
    ev->add_option("--from-checkpoint", inv.from_checkpoint, "checkpoint to evaluate")
        ->required()
        ->check(CLI::ExistingFile);
    ev->add_option("--split", inv.split, "object split")->check(CLI::IsMember({"train", "ood"}));
    ev->add_option("--episodes", inv.episodes, "episodes per object")
        ->check(CLI::PositiveNumber);

    CLI::App* ablate = app.add_subcommand("ablate", "train and evaluate an ablation sweep");
    add_common(ablate, true);
    ablate->add_option("--preset", inv.preset, "sweep preset")
        ->required()
        ->check(CLI::IsMember({"expert_count", "gate_inputs", "router"}));

    CLI::App* gates = app.add_subcommand("export-gates", "export per-object gate weights and a "
                                                         "2d projection");
    add_common(gates, true);
    gates->add_option("--from-checkpoint", inv.from_checkpoint, "gate checkpoint")
        ->required()
        ->check(CLI::ExistingFile);
    gates->add_option("--episodes", inv.episodes, "episodes per object")
        ->check(CLI::PositiveNumber);

    CLI::App* recount =
        app.add_subcommand("recount", "replay trajectory logs and verify success counts");
    recount->add_option("logs", inv.logs, "trajectory log files or directories")
        ->required()
        ->check(CLI::ExistingPath);
    recount->add_option("--out", inv.out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        app.exit(e);
        return 0;
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        std::fputs(app.help().c_str(), stderr);
        return 2;
    }

    CLI::App* sub = app.get_subcommands().front();
    inv.command = sub->get_name();
    const CLI::Option* seed_opt = sub->get_option_no_throw("--seed");
    inv.seed_from_flag = seed_opt != nullptr && seed_opt->count() > 0;
    inv.workers = resolved_workers(inv.workers);

    RunConfig cfg;
    std::string seed_source;
    if (inv.command != "recount") {
        try {
            cfg = load_config(inv.config_path);
            cfg.seed = resolve_seed(inv, cfg.seed, seed_source);
            if (!inv.router.empty())
                cfg.router = inv.router;
            if (inv.topk > 0)
                cfg.topk_k = inv.topk;
            if (inv.command == "eval" && inv.episodes > 0)
                cfg.eval_episodes = inv.episodes;
            validate_config(cfg);
        } catch (const std::exception& e) {
            std::fprintf(stderr, "invalid config: %s\n", e.what());
            return 2;
        }
    }

    try {
        std::filesystem::create_directories(inv.out);
        if (inv.command == "gen-objects")
            return cmd_gen_objects(inv, cfg, seed_source);
        if (inv.command == "train-base")
            return cmd_train_base(inv, cfg, seed_source);
        if (inv.command == "train-experts")
            return cmd_train_experts(inv, cfg, seed_source);
        if (inv.command == "train-gate")
            return cmd_train_gate(inv, cfg, seed_source);
        if (inv.command == "eval")
            return cmd_eval(inv, cfg, seed_source);
        if (inv.command == "ablate")
            return cmd_ablate(inv, cfg, seed_source);
        if (inv.command == "export-gates")
            return cmd_export_gates(inv, cfg, seed_source);
        return cmd_recount(inv);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

}  // namespace dexmoe
