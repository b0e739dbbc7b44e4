#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "dexmoe/pipeline.hpp"

using namespace dexmoe;

namespace {

RunConfig tiny_config() {
    RunConfig cfg;
    cfg.num_envs = 8;
    cfg.episode_length = 30;
    cfg.horizon = 4;
    cfg.minibatch_size = 16;
    cfg.epochs = 2;
    cfg.mu_pc_hidden = {8};
    cfg.mu_e_hidden = {12};
    cfg.policy_hidden = {16};
    cfg.gate_hidden = 8;
    cfg.expert_count = 6;
    cfg.object_count = 9;
    cfg.base_updates = 2;
    cfg.expert_updates = 1;
    cfg.gate_updates = 1;
    cfg.checkpoint_every = 2;
    cfg.probe_episodes = 1;
    cfg.probe_objects_per_category = 1;
    cfg.eval_episodes = 1;
    cfg.seed = 13;
    return cfg;
}

std::string fresh_dir(const char* name) {
    const std::string dir = std::string("/tmp/dexmoe_test_pipeline_") + name;
    std::filesystem::remove_all(dir);
    return dir;
}

std::string read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

Vec flat_net(const nn::DenseNet& net) {
    Vec out;
    for (const auto block : nn::param_blocks(net))
        out.insert(out.end(), block.begin(), block.end());
    return out;
}

Vec flat_policy(const PolicyNet& p) {
    Vec out = flat_net(p.net);
    out.insert(out.end(), p.log_std.begin(), p.log_std.end());
    return out;
}

PolicyEnsemble base_init_ensemble(const RunConfig& cfg) {
    EnsembleConfig ec = ensemble_config(cfg, 0);
    ec.router_mode = RouterMode::soft;
    ec.topk_k = 1;
    return make_ensemble(ec);
}

std::vector<int> train_ids(const std::vector<ObjectSpec>& objects) {
    std::vector<int> ids(static_cast<size_t>(train_split_count(static_cast<int>(objects.size()))));
    std::iota(ids.begin(), ids.end(), 0);
    return ids;
}

ObjectSpec blob_object(int id, double center) {
    ObjectSpec o;
    o.id = id;
    o.pc_feature.assign(kPcFeatureDim, center);
    o.pc_feature[0] += 0.01 * id;
    return o;
}

}  // namespace

TEST_CASE("round-robin env assignment wraps over the subset") {
    const std::vector<int> subset{3, 7};
    const std::vector<int> got = round_robin_envs(5, subset);
    CHECK(got == std::vector<int>{3, 7, 3, 7, 3});
    CHECK_THROWS(round_robin_envs(0, subset));
    CHECK_THROWS(round_robin_envs(4, {}));
}

TEST_CASE("stage seeds differ across stages and units") {
    std::set<uint64_t> seen;
    for (const Stage s : {Stage::base, Stage::experts, Stage::gate})
        for (int unit = 0; unit < 8; ++unit)
            seen.insert(stage_seed(5, s, unit));
    CHECK(seen.size() == 24);
    CHECK(stage_seed(5, Stage::base, 0) != stage_seed(6, Stage::base, 0));
    CHECK(stage_seed(5, Stage::base, 0) == stage_seed(5, Stage::base, 0));
}

TEST_CASE("worst categories sorts ascending with ties toward low indices") {
    const std::array<double, kNumCategories> scores{2.0, 0.5, 0.5, 3.0, 0.1, 2.0};
    CHECK(worst_categories(scores, 3) == std::vector<int>{4, 1, 2});
    CHECK(worst_categories(scores, 0).empty());
    CHECK(worst_categories(scores, 6) == std::vector<int>{4, 1, 2, 0, 5, 3});
    CHECK_THROWS(worst_categories(scores, 7));
    auto with_nan = scores;
    with_nan[0] = std::nan("");
    CHECK_THROWS(worst_categories(with_nan, 2));
}

TEST_CASE("two-means separates well-separated blobs deterministically") {
    std::vector<ObjectSpec> objects;
    for (int id = 0; id < 4; ++id)
        objects.push_back(blob_object(id, 0.0));
    for (int id = 4; id < 7; ++id)
        objects.push_back(blob_object(id, 5.0));
    const std::vector<int> ids{0, 1, 2, 3, 4, 5, 6};
    const auto split = split_two_clusters(objects, ids);
    CHECK(split[0] == std::vector<int>{0, 1, 2, 3});
    CHECK(split[1] == std::vector<int>{4, 5, 6});
    CHECK(split_two_clusters(objects, ids) == split);

    const auto single = split_two_clusters(objects, {2});
    CHECK(single[0] == std::vector<int>{2});
    CHECK(single[1].empty());

    const auto pair = split_two_clusters(objects, {6, 1});
    CHECK(pair[0] == std::vector<int>{1});
    CHECK(pair[1] == std::vector<int>{6});

    CHECK_THROWS(split_two_clusters(objects, {}));
    CHECK_THROWS(split_two_clusters(objects, {99}));
}

TEST_CASE("taxonomy layouts cover every category") {
    const auto objects = generate_objects(15, 3);
    const int train_count = train_split_count(15);
    REQUIRE(train_count == 10);

    const ExpertTaxonomy one = build_taxonomy(1, objects, train_count, nullptr);
    CHECK(one.objects_of_expert.size() == 1);
    CHECK(one.objects_of_expert[0].size() == 10);
    CHECK(one.roles[0] == "generalist");

    const ExpertTaxonomy six = build_taxonomy(6, objects, train_count, nullptr);
    CHECK(six.objects_of_expert.size() == 6);
    for (int c = 0; c < 6; ++c) {
        for (const int id : six.objects_of_expert[static_cast<size_t>(c)])
            CHECK(objects[static_cast<size_t>(id)].category == c);
        CHECK(six.roles[static_cast<size_t>(c)] == "specialist");
        CHECK(six.names[static_cast<size_t>(c)] == category_name(c));
    }

    const std::array<double, kNumCategories> scores{5.0, 0.2, 4.0, 0.4, 0.3, 6.0};
    const ExpertTaxonomy four = build_taxonomy(4, objects, train_count, &scores);
    CHECK(four.names == std::vector<std::string>{"block", "airplane", "animal", "generalist"});
    CHECK(four.roles ==
          std::vector<std::string>{"specialist", "specialist", "specialist", "generalist"});
    CHECK(four.objects_of_expert[3].size() == 10);
    CHECK_THROWS_WITH_AS(build_taxonomy(4, objects, train_count, nullptr),
                         "the 4-expert layout needs category scores", std::invalid_argument);

    const auto many = generate_objects(24, 3);
    const ExpertTaxonomy eight = build_taxonomy(8, many, train_split_count(24), nullptr);
    CHECK(eight.objects_of_expert.size() == 8);
    std::set<int> cat4;
    for (const int id : eight.objects_of_expert[4])
        cat4.insert(id);
    for (const int id : eight.objects_of_expert[5])
        cat4.insert(id);
    std::set<int> want4;
    for (int id = 0; id < train_split_count(24); ++id)
        if (many[static_cast<size_t>(id)].category == 4)
            want4.insert(id);
    CHECK(cat4 == want4);
    CHECK(!eight.objects_of_expert[4].empty());
    CHECK(!eight.objects_of_expert[5].empty());
    CHECK(eight.names[4] == "airplane_a");
    CHECK(eight.names[7] == "train_b");

    CHECK_THROWS(build_taxonomy(8, objects, train_count, nullptr));
    CHECK_THROWS(build_taxonomy(3, objects, train_count, nullptr));
}

TEST_CASE("taxonomy validation rejects gaps and stray ids") {
    const auto objects = generate_objects(15, 3);
    const int train_count = train_split_count(15);
    ExpertTaxonomy tax = build_taxonomy(6, objects, train_count, nullptr);

    ExpertTaxonomy empty = tax;
    empty.objects_of_expert[2].clear();
    CHECK_THROWS_WITH_AS(empty.validate(objects, train_count),
                         "an expert has no training objects", std::invalid_argument);

    ExpertTaxonomy stray = tax;
    stray.objects_of_expert[0].push_back(train_count);
    CHECK_THROWS_WITH_AS(stray.validate(objects, train_count),
                         "taxonomy contains an id outside the training split",
                         std::invalid_argument);

    ExpertTaxonomy uncovered = tax;
    uncovered.n_experts = 1;
    uncovered.objects_of_expert = {tax.objects_of_expert[0]};
    uncovered.roles = {"generalist"};
    uncovered.names = {"generalist"};
    CHECK_THROWS(uncovered.validate(objects, train_count));

    ExpertTaxonomy mislabeled = tax;
    mislabeled.roles.pop_back();
    CHECK_THROWS(mislabeled.validate(objects, train_count));
}

TEST_CASE("category probe is deterministic and scores every category") {
    const RunConfig cfg = tiny_config();
    const auto objects = generate_objects(cfg.object_count, cfg.seed);
    const PolicyEnsemble ens = base_init_ensemble(cfg);
    const auto a = probe_category_scores(ens, objects, cfg, 1);
    const auto b = probe_category_scores(ens, objects, cfg, 4);
    CHECK(a == b);
    for (const double s : a) {
        CHECK(std::isfinite(s));
        CHECK(s >= 0.0);
    }
}

TEST_CASE("a zero-budget base stage checkpoints the initialization") {
    RunConfig cfg = tiny_config();
    cfg.base_updates = 0;
    const auto objects = generate_objects(cfg.object_count, cfg.seed);
    const std::string dir = fresh_dir("zero_budget");
    const StageResult res = run_base_stage(cfg, objects, nullptr, dir, 1);
    CHECK_FALSE(res.diverged);
    CHECK(res.updates_run == 0);
    CHECK(res.final.update_index == 0);
    const PolicyEnsemble init = base_init_ensemble(cfg);
    CHECK(flat_net(res.final.ens.mu_pc) == flat_net(init.mu_pc));
    CHECK(flat_net(res.final.ens.mu_e) == flat_net(init.mu_e));
    CHECK(flat_policy(res.final.ens.base) == flat_policy(init.base));
    CHECK(read_bytes(dir + "/base.ckpt") == read_bytes(dir + "/base_last.ckpt"));
    std::filesystem::remove_all(dir);
}

TEST_CASE("the same seed trains the same base checkpoint twice") {
    const RunConfig cfg = tiny_config();
    const auto objects = generate_objects(cfg.object_count, cfg.seed);
    const std::string dir_a = fresh_dir("repeat_a");
    const std::string dir_b = fresh_dir("repeat_b");
    const StageResult a = run_base_stage(cfg, objects, nullptr, dir_a, 1);
    const StageResult b = run_base_stage(cfg, objects, nullptr, dir_b, 1);
    CHECK_FALSE(a.diverged);
    CHECK_FALSE(b.diverged);
    CHECK(read_bytes(dir_a + "/base.ckpt") == read_bytes(dir_b + "/base.ckpt"));
    CHECK(read_bytes(dir_a + "/stats_base.csv") == read_bytes(dir_b + "/stats_base.csv"));
    std::filesystem::remove_all(dir_a);
    std::filesystem::remove_all(dir_b);
}

TEST_CASE("training continues bitwise after a save and load") {
    const RunConfig cfg = tiny_config();
    const auto objects = generate_objects(cfg.object_count, cfg.seed);
    const auto envs = round_robin_envs(cfg.num_envs, train_ids(objects));
    const std::string path = fresh_dir("continue") + "_mid.ckpt";

    Trainer straight(cfg, objects, Stage::base, 0, envs, base_init_ensemble(cfg), 1);
    for (int i = 0; i < 4; ++i)
        straight.step();

    Trainer split(cfg, objects, Stage::base, 0, envs, base_init_ensemble(cfg), 1);
    split.step();
    split.step();
    save_checkpoint(path, split.snapshot());
    Trainer resumed(cfg, objects, load_checkpoint(path), 1);
    CHECK(resumed.update_index() == 2);
    resumed.step();
    resumed.step();

    const std::string path_a = path + ".straight";
    const std::string path_b = path + ".resumed";
    save_checkpoint(path_a, straight.snapshot());
    save_checkpoint(path_b, resumed.snapshot());
    CHECK(read_bytes(path_a) == read_bytes(path_b));
    CHECK(straight.audit_samples() == 4u * cfg.horizon * cfg.num_envs);

    std::remove(path.c_str());
    std::remove(path_a.c_str());
    std::remove(path_b.c_str());
}

TEST_CASE("resume rejects a mismatched config or corpus") {
    const RunConfig cfg = tiny_config();
    const auto objects = generate_objects(cfg.object_count, cfg.seed);
    Trainer tr(cfg, objects, Stage::base, 0, round_robin_envs(cfg.num_envs, train_ids(objects)),
               base_init_ensemble(cfg), 1);
    const CheckpointData ck = tr.snapshot();

    RunConfig other = cfg;
    other.lr = 4e-3;
    CHECK_THROWS_WITH_AS(Trainer(other, objects, ck, 1),
                         "checkpoint was trained under a different config", std::invalid_argument);
    const auto other_objects = generate_objects(cfg.object_count, cfg.seed + 1);
    CHECK_THROWS_WITH_AS(Trainer(cfg, other_objects, ck, 1),
                         "checkpoint was trained on a different object corpus",
                         std::invalid_argument);
}

TEST_CASE("a broken policy surfaces as divergence instead of a bad update") {
    const RunConfig cfg = tiny_config();
    const auto objects = generate_objects(cfg.object_count, cfg.seed);
    PolicyEnsemble ens = base_init_ensemble(cfg);
    ens.base.net.layers[0].w[0] = std::nan("");
    Trainer tr(cfg, objects, Stage::base, 0, round_robin_envs(cfg.num_envs, train_ids(objects)),
               std::move(ens), 1);
    CHECK_THROWS(tr.step());
}

TEST_CASE("a single expert on all data continues the base trajectory") {
    RunConfig cfg = tiny_config();
    cfg.expert_count = 1;
    cfg.topk_k = 1;
    cfg.base_updates = 1;
    cfg.expert_updates = 2;
    const auto objects = generate_objects(cfg.object_count, cfg.seed);
    const std::string dir = fresh_dir("one_expert");

    const StageResult base = run_base_stage(cfg, objects, nullptr, dir, 1);
    REQUIRE_FALSE(base.diverged);
    const StageResult experts = run_experts_stage(cfg, objects, base.final, dir, 1);
    REQUIRE_FALSE(experts.diverged);
    REQUIRE(experts.final.ens.experts.size() == 1);

    PolicyEnsemble oracle = base.final.ens;
    EnvRuntime rt = make_runtime(objects, round_robin_envs(cfg.num_envs, train_ids(objects)),
                                 env_config(cfg), stage_seed(cfg.seed, Stage::experts, 0), 1,
                                 cfg.smoothing_alpha);
    Rng trng = Rng::stream(cfg.seed, {stream_tag::train, static_cast<uint64_t>(Stage::experts),
                                      0});
    AdamBank bank;
    bank.init_like(oracle);
    TrainableMask mask;
    mask.base = true;
    mask.experts.assign(oracle.experts.size(), false);
    double lr = cfg.lr;
    for (int i = 0; i < cfg.expert_updates; ++i) {
        ForwardSpec spec;
        spec.mode = RolloutPolicy::base;
        spec.objects = &rt.objects;
        RolloutBatch batch = collect_rollout(rt, oracle, spec, cfg.horizon, true);
        PpoConfig pcfg = ppo_config(cfg);
        pcfg.lr = lr;
        const UpdateStats st = ppo_update(oracle, batch, pcfg, mask, spec, bank, trng);
        lr = adaptive_lr(lr, st.approx_kl, cfg.kl_threshold);
    }
    CHECK(flat_policy(experts.final.ens.experts[0]) == flat_policy(oracle.base));
    std::filesystem::remove_all(dir);
}

TEST_CASE("encoders and the base policy freeze through the expert stage") {
    const RunConfig cfg = tiny_config();
    const auto objects = generate_objects(cfg.object_count, cfg.seed);
    const std::string dir = fresh_dir("freeze_experts");
    const StageResult base = run_base_stage(cfg, objects, nullptr, dir, 1);
    REQUIRE_FALSE(base.diverged);
    const StageResult experts = run_experts_stage(cfg, objects, base.final, dir, 1);
    REQUIRE_FALSE(experts.diverged);

    CHECK(flat_net(experts.final.ens.mu_pc) == flat_net(base.final.ens.mu_pc));
    CHECK(flat_net(experts.final.ens.mu_e) == flat_net(base.final.ens.mu_e));
    CHECK(flat_policy(experts.final.ens.base) == flat_policy(base.final.ens.base));

    CHECK(experts.taxonomy.n_experts == 6);
    const auto& unit5 = experts.taxonomy.objects_of_expert[5];
    for (const EnvSlot& slot : experts.final.envs)
        CHECK(std::count(unit5.begin(), unit5.end(), slot.object_index) == 1);

    const Vec before = flat_policy(base.final.ens.base);
    for (size_t i = 0; i < experts.final.ens.experts.size(); ++i)
        CHECK(flat_policy(experts.final.ens.experts[i]) != before);
    std::filesystem::remove_all(dir);
}

TEST_CASE("the expert stage resumes across unit boundaries") {
    const RunConfig cfg = tiny_config();
    const auto objects = generate_objects(cfg.object_count, cfg.seed);
    const std::string dir_a = fresh_dir("units_a");
    const std::string dir_b = fresh_dir("units_b");
    const StageResult base = run_base_stage(cfg, objects, nullptr, dir_a, 1);
    REQUIRE_FALSE(base.diverged);
    const StageResult full = run_experts_stage(cfg, objects, base.final, dir_a, 1);
    REQUIRE_FALSE(full.diverged);

    PolicyEnsemble entry = make_ensemble(ensemble_config(cfg, cfg.expert_count));
    entry.mu_pc = base.final.ens.mu_pc;
    entry.mu_e = base.final.ens.mu_e;
    entry.base = base.final.ens.base;
    for (PolicyNet& e : entry.experts)
        e = base.final.ens.base;
    const int train_count = train_split_count(static_cast<int>(objects.size()));
    const ExpertTaxonomy tax = build_taxonomy(cfg.expert_count, objects, train_count, nullptr);
    Trainer unit0(cfg, objects, Stage::experts, 0,
                  round_robin_envs(cfg.num_envs, tax.objects_of_expert[0]), std::move(entry), 1);
    for (int i = 0; i < cfg.expert_updates; ++i)
        unit0.step();

    const StageResult rest = run_experts_stage(cfg, objects, unit0.snapshot(), dir_b, 1);
    REQUIRE_FALSE(rest.diverged);
    CHECK(rest.updates_run == full.updates_run - cfg.expert_updates);
    CHECK(read_bytes(dir_a + "/experts.ckpt") == read_bytes(dir_b + "/experts.ckpt"));
    std::filesystem::remove_all(dir_b);
    std::filesystem::remove_all(dir_a);
}

TEST_CASE("re-running a finished expert stage changes nothing") {
    const RunConfig cfg = tiny_config();
    const auto objects = generate_objects(cfg.object_count, cfg.seed);
    const std::string dir = fresh_dir("idempotent");
    const StageResult base = run_base_stage(cfg, objects, nullptr, dir, 1);
    REQUIRE_FALSE(base.diverged);
    const StageResult first = run_experts_stage(cfg, objects, base.final, dir, 1);
    REQUIRE_FALSE(first.diverged);
    const std::string before = read_bytes(dir + "/experts.ckpt");

    const StageResult again = run_experts_stage(cfg, objects, first.final, dir, 1);
    REQUIRE_FALSE(again.diverged);
    CHECK(again.updates_run == 0);
    CHECK(read_bytes(dir + "/experts.ckpt") == before);

    CHECK_THROWS_WITH_AS(run_base_stage(cfg, objects, &first.final, dir, 1),
                         "base stage cannot resume a checkpoint from the experts stage",
                         std::invalid_argument);
    RunConfig fewer = cfg;
    fewer.expert_count = 4;
    CHECK_THROWS_WITH_AS(run_gate_stage(fewer, objects, first.final, dir, 1),
                         "checkpoint expert count does not match the config",
                         std::invalid_argument);
    std::filesystem::remove_all(dir);
}

TEST_CASE("the base stage resumes from its rolling checkpoint") {
    RunConfig cfg = tiny_config();
    cfg.base_updates = 3;
    cfg.checkpoint_every = 1;
    const auto objects = generate_objects(cfg.object_count, cfg.seed);
    const std::string dir_a = fresh_dir("base_resume_a");
    const std::string dir_b = fresh_dir("base_resume_b");
    const StageResult full = run_base_stage(cfg, objects, nullptr, dir_a, 1);
    REQUIRE_FALSE(full.diverged);

    RunConfig head = cfg;
    Trainer tr(head, objects, Stage::base, 0, round_robin_envs(cfg.num_envs, train_ids(objects)),
               base_init_ensemble(cfg), 1);
    tr.step();
    const CheckpointData mid = tr.snapshot();
    const StageResult rest = run_base_stage(cfg, objects, &mid, dir_b, 1);
    REQUIRE_FALSE(rest.diverged);
    CHECK(rest.updates_run == 2);
    CHECK(read_bytes(dir_a + "/base.ckpt") == read_bytes(dir_b + "/base.ckpt"));
    std::filesystem::remove_all(dir_a);
    std::filesystem::remove_all(dir_b);
}

TEST_CASE("a full pipeline run is reproducible and worker-count invariant") {
    const RunConfig cfg = tiny_config();
    const auto objects = generate_objects(cfg.object_count, cfg.seed);
    const std::string dir_a = fresh_dir("full_a");
    const std::string dir_b = fresh_dir("full_b");
    const std::string dir_c = fresh_dir("full_c");
    const PipelineResult a = run_full_pipeline(cfg, objects, dir_a, 1);
    const PipelineResult b = run_full_pipeline(cfg, objects, dir_b, 1);
    const PipelineResult c = run_full_pipeline(cfg, objects, dir_c, 4);
    REQUIRE(a.completed);
    REQUIRE(b.completed);
    REQUIRE(c.completed);
    for (const char* name : {"/base.ckpt", "/experts.ckpt", "/gate.ckpt", "/taxonomy.json"}) {
        CHECK(read_bytes(dir_a + name) == read_bytes(dir_b + name));
        CHECK(read_bytes(dir_a + name) == read_bytes(dir_c + name));
    }
    CHECK(a.gate.final.stage == Stage::gate);
    CHECK(a.gate.final.update_index == cfg.gate_updates);
    std::filesystem::remove_all(dir_a);
    std::filesystem::remove_all(dir_b);
    std::filesystem::remove_all(dir_c);
}

TEST_CASE("gate training leaves encoders and experts frozen") {
    RunConfig cfg = tiny_config();
    cfg.expert_updates = 0;
    cfg.gate_updates = 2;
    const auto objects = generate_objects(cfg.object_count, cfg.seed);
    const std::string dir = fresh_dir("gate_freeze");
    const PipelineResult run = run_full_pipeline(cfg, objects, dir, 1);
    REQUIRE(run.completed);

    const PolicyEnsemble& before = run.experts.final.ens;
    const PolicyEnsemble& after = run.gate.final.ens;
    CHECK(flat_net(after.mu_pc) == flat_net(before.mu_pc));
    CHECK(flat_net(after.mu_e) == flat_net(before.mu_e));
    CHECK(flat_policy(after.base) == flat_policy(before.base));
    for (size_t i = 0; i < after.experts.size(); ++i) {
        CHECK(flat_policy(after.experts[i]) == flat_policy(before.experts[i]));
        CHECK(flat_policy(after.experts[i]) == flat_policy(before.base));
    }

    Vec o(kObsDim), z(kZDim), e_shape(static_cast<size_t>(after.gate_view));
    Rng rng = Rng::stream(7, {99});
    for (double& v : o)
        v = rng.normal();
    for (double& v : z)
        v = rng.normal();
    for (double& v : e_shape)
        v = rng.normal();
    const PolicyOutput moe = policy_forward(after, o, z, ForwardMode::moe, e_shape);
    const PolicyOutput single = policy_forward(after, o, z, ForwardMode::base);
    REQUIRE(moe.gate_weights.size() == after.experts.size());
    double sum = 0;
    for (const double w : moe.gate_weights) {
        CHECK(w >= 0.0);
        sum += w;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    for (int j = 0; j < kNumJoints; ++j)
        CHECK(moe.mean[static_cast<size_t>(j)] ==
              doctest::Approx(single.mean[static_cast<size_t>(j)]).epsilon(1e-12));
    CHECK(moe.value == doctest::Approx(single.value).epsilon(1e-12));
    std::filesystem::remove_all(dir);
}

TEST_CASE("a gate ablation branches from a shared expert checkpoint") {
    RunConfig cfg = tiny_config();
    const auto objects = generate_objects(cfg.object_count, cfg.seed);
    const std::string dir = fresh_dir("branch");
    const StageResult base = run_base_stage(cfg, objects, nullptr, dir, 1);
    REQUIRE_FALSE(base.diverged);
    const StageResult experts = run_experts_stage(cfg, objects, base.final, dir, 1);
    REQUIRE_FALSE(experts.diverged);

    RunConfig topk_cfg = cfg;
    topk_cfg.router = "topk";
    topk_cfg.topk_k = 2;
    const StageResult topk = run_gate_stage(topk_cfg, objects, experts.final, dir + "/topk", 1);
    REQUIRE_FALSE(topk.diverged);
    CHECK(topk.final.ens.router_mode == RouterMode::topk);
    CHECK(topk.final.ens.topk_k == 2);

    RunConfig switch_cfg = cfg;
    switch_cfg.router = "switch";
    const StageResult sw = run_gate_stage(switch_cfg, objects, experts.final, dir + "/switch", 1);
    REQUIRE_FALSE(sw.diverged);
    CHECK(sw.final.ens.router_mode == RouterMode::one_hot);

    Vec o(kObsDim, 0.1), z(kZDim, -0.2), e_shape(static_cast<size_t>(sw.final.ens.gate_view), 0.3);
    const PolicyOutput out = policy_forward(sw.final.ens, o, z, ForwardMode::moe, e_shape);
    int ones = 0, zeros = 0;
    for (const double w : out.gate_weights) {
        if (w == 1.0)
            ++ones;
        if (w == 0.0)
            ++zeros;
    }
    CHECK(ones == 1);
    CHECK(zeros == static_cast<int>(out.gate_weights.size()) - 1);
    std::filesystem::remove_all(dir);
}
