#include "dexmoe/policy.hpp"

#include <doctest.h>

#include <cmath>

#include "test_support.hpp"

using namespace dexmoe;

namespace {

EnsembleConfig small_config(int n_experts, RouterMode mode = RouterMode::soft, int k = 1) {
    EnsembleConfig cfg;
    cfg.mu_pc_hidden = {16};
    cfg.mu_e_hidden = {24};
    cfg.policy_hidden = {20, 20};
    cfg.gate_hidden = 8;
    cfg.n_experts = n_experts;
    cfg.router_mode = mode;
    cfg.topk_k = k;
    cfg.seed = 77;
    return cfg;
}

Vec random_vec(size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Vec v(n);
    for (auto& x : v)
        x = rng.uniform(lo, hi);
    return v;
}

nn::DenseNet zero_net(int in, std::span<const int> hidden, int out) {
    nn::DenseNet net = nn::make_net(in, hidden, out, nn::Act::elu, nn::Act::identity, 1, 1);
    for (auto& layer : net.layers) {
        std::fill(layer.w.begin(), layer.w.end(), 0.0);
        std::fill(layer.b.begin(), layer.b.end(), 0.0);
    }
    return net;
}

}  // namespace

TEST_CASE("shape encoding appends the category one-hot") {
    const int hidden[] = {16};
    const nn::DenseNet zero_mu = zero_net(kPcFeatureDim, hidden, kPcEmbedDim);
    Rng rng(11);
    const Vec p = random_vec(kPcFeatureDim, rng);

    const ShapeDescriptor d = encode_shape(zero_mu, p, 0);
    REQUIRE(d.e_shape.size() == static_cast<size_t>(kShapeDim));
    for (int i = 0; i < kPcEmbedDim; ++i)
        CHECK(d.e_shape[static_cast<size_t>(i)] == 0.0);
    CHECK(d.e_shape[kPcEmbedDim] == 1.0);
    for (int i = 1; i < kNumCategories; ++i)
        CHECK(d.e_shape[static_cast<size_t>(kPcEmbedDim + i)] == 0.0);

    const nn::DenseNet mu = nn::make_net(kPcFeatureDim, hidden, kPcEmbedDim, nn::Act::elu,
                                         nn::Act::identity, 5, 1);
    const ShapeDescriptor a = encode_shape(mu, p, 3);
    const ShapeDescriptor b = encode_shape(mu, p, 3);
    CHECK(a.e_shape == b.e_shape);
    CHECK(a.e_shape[kPcEmbedDim + 3] == 1.0);
    CHECK(a.pc_embedding.size() == static_cast<size_t>(kPcEmbedDim));
    CHECK_THROWS(encode_shape(mu, p, 6));
    CHECK_THROWS(encode_shape(mu, p, -1));
    CHECK_THROWS(encode_shape(mu, Vec(99, 0.0), 0));
}

TEST_CASE("privileged encoding has fixed width and exact gradients") {
    const int hidden[] = {24};
    const nn::DenseNet zero_mu = zero_net(kEPhysDim + kShapeDim, hidden, kZDim);
    Rng rng(12);
    Vec e_phys = random_vec(kEPhysDim, rng);
    const Vec e_shape = random_vec(kShapeDim, rng);

    const Vec z0 = encode_privileged(zero_mu, e_phys, e_shape);
    REQUIRE(z0.size() == static_cast<size_t>(kZDim));
    for (const double v : z0)
        CHECK(v == 0.0);

    const nn::DenseNet mu = nn::make_net(kEPhysDim + kShapeDim, hidden, kZDim, nn::Act::elu,
                                         nn::Act::identity, 9, 2);
    CHECK(encode_privileged(mu, e_phys, e_shape).size() == static_cast<size_t>(kZDim));
    CHECK_THROWS(encode_privileged(mu, Vec(18, 0.0), e_shape));

    // d z[k] / d e_phys[i] against central differences through the encoder.
    nn::ForwardCache cache;
    encode_privileged(mu, e_phys, e_shape, &cache);
    Vec dy(kZDim, 0.0);
    const int k = 7;
    dy[k] = 1.0;
    Vec dx;
    nn::dense_backward(mu, cache, dy, nullptr, &dx);
    int checked = 0;
    for (int i = 0; i < kEPhysDim; ++i) {
        const double numeric = finite_diff(
            [&] { return encode_privileged(mu, e_phys, e_shape)[k]; }, e_phys[static_cast<size_t>(i)]);
        CHECK(grad_rel_err(dx[static_cast<size_t>(i)], numeric) < 1e-5);
        ++checked;
    }
    CHECK(checked == kEPhysDim);
}

TEST_CASE("routing examples: uniform, argmax, and kept-pair softmax") {
    const Vec zero_logits(4, 0.0);
    const Vec uniform = route_weights(zero_logits, RouterMode::soft, 1);
    for (const double w : uniform)
        CHECK(w == 0.25);

    const Vec sw = route_weights(Vec{1.0, 3.0, 2.0}, RouterMode::one_hot, 1);
    CHECK(sw[0] == 0.0);
    CHECK(sw[1] == 1.0);
    CHECK(sw[2] == 0.0);

    const Vec tk = route_weights(Vec{0.0, std::log(3.0), -5.0}, RouterMode::topk, 2);
    CHECK(tk[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(tk[1] == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(tk[2] == 0.0);
}

TEST_CASE("routing is a distribution in every mode and k equal to n is soft") {
    Rng rng(13);
    for (int rep = 0; rep < 200; ++rep) {
        const int n = 1 + static_cast<int>(rng.uniform_int(8));
        const Vec logits = random_vec(static_cast<size_t>(n), rng, -20.0, 20.0);
        const int k = 1 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n)));
        for (const RouterMode mode : {RouterMode::soft, RouterMode::topk, RouterMode::one_hot}) {
            const Vec w = route_weights(logits, mode, k);
            double sum = 0.0;
            for (const double wi : w) {
                CHECK(wi >= 0.0);
                sum += wi;
            }
            CHECK(std::fabs(sum - 1.0) <= 1e-12);
        }
        const Vec soft = route_weights(logits, RouterMode::soft, 1);
        const Vec full = route_weights(logits, RouterMode::topk, n);
        for (int i = 0; i < n; ++i)
            CHECK(soft[static_cast<size_t>(i)] == full[static_cast<size_t>(i)]);
    }
}

TEST_CASE("routing ties resolve toward the lowest index") {
    const Vec w1 = route_weights(Vec{5.0, 5.0, 2.0}, RouterMode::one_hot, 1);
    CHECK(w1[0] == 1.0);
    CHECK(w1[1] == 0.0);

    const Vec w2 = route_weights(Vec{2.0, 5.0, 5.0, 5.0}, RouterMode::topk, 2);
    CHECK(w2[0] == 0.0);
    CHECK(w2[1] == 0.5);
    CHECK(w2[2] == 0.5);
    CHECK(w2[3] == 0.0);
}

TEST_CASE("routing gradient matches finite differences and vanishes for one-hot") {
    Rng rng(14);
    for (int rep = 0; rep < 50; ++rep) {
        const int n = 3 + static_cast<int>(rng.uniform_int(4));
        Vec logits = random_vec(static_cast<size_t>(n), rng, -2.0, 2.0);
        const Vec g = random_vec(static_cast<size_t>(n), rng);
        const Vec w = route_weights(logits, RouterMode::soft, 1);
        const Vec dl = route_backward(w, g);
        for (int i = 0; i < n; ++i) {
            const double numeric = finite_diff(
                [&] {
                    const Vec ww = route_weights(logits, RouterMode::soft, 1);
                    double s = 0.0;
                    for (int j = 0; j < n; ++j)
                        s += g[static_cast<size_t>(j)] * ww[static_cast<size_t>(j)];
                    return s;
                },
                logits[static_cast<size_t>(i)]);
            CHECK(grad_rel_err(dl[static_cast<size_t>(i)], numeric) < 1e-5);
        }
    }

    // Well-separated logits keep the top-k set stable under the probe.
    Vec logits{3.0, 1.0, -1.0, -3.0};
    const Vec g{0.7, -0.4, 0.9, 0.2};
    const Vec w = route_weights(logits, RouterMode::topk, 2);
    const Vec dl = route_backward(w, g);
    for (int i = 0; i < 4; ++i) {
        const double numeric = finite_diff(
            [&] {
                const Vec ww = route_weights(logits, RouterMode::topk, 2);
                double s = 0.0;
                for (int j = 0; j < 4; ++j)
                    s += g[static_cast<size_t>(j)] * ww[static_cast<size_t>(j)];
                return s;
            },
            logits[static_cast<size_t>(i)]);
        CHECK(grad_rel_err(dl[static_cast<size_t>(i)], numeric) < 1e-5);
    }

    const Vec hot = route_weights(logits, RouterMode::one_hot, 1);
    const Vec dhot = route_backward(hot, g);
    for (const double d : dhot)
        CHECK(d == 0.0);
}

TEST_CASE("aggregation is an exact convex combination") {
    Rng rng(15);

    std::vector<Vec> ys{random_vec(kNumJoints, rng), random_vec(kNumJoints, rng),
                        random_vec(kNumJoints, rng)};
    const Vec onehot{0.0, 1.0, 0.0};
    const Vec picked = aggregate(onehot, ys);
    for (int j = 0; j < kNumJoints; ++j)
        CHECK(picked[static_cast<size_t>(j)] == ys[1][static_cast<size_t>(j)]);

    const Vec a = random_vec(kNumJoints, rng);
    Vec neg = a;
    for (auto& x : neg)
        x = -x;
    const Vec zero = aggregate(Vec{0.5, 0.5}, {a, neg});
    for (const double v : zero)
        CHECK(v == 0.0);

    for (int rep = 0; rep < 30; ++rep) {
        Vec w = random_vec(3, rng, 0.0, 1.0);
        const double s = w[0] + w[1] + w[2];
        for (auto& x : w)
            x /= s;
        const Vec y = aggregate(w, ys);
        for (int j = 0; j < kNumJoints; ++j) {
            double oracle = 0.0;
            for (int i = 0; i < 3; ++i)
                oracle += w[static_cast<size_t>(i)] * ys[static_cast<size_t>(i)][static_cast<size_t>(j)];
            CHECK(std::fabs(y[static_cast<size_t>(j)] - oracle) <= 1e-15);
        }

        std::vector<Vec> scaled = ys;
        for (auto& v : scaled)
            for (auto& x : v)
                x *= 2.5;
        const Vec y2 = aggregate(w, scaled);
        for (int j = 0; j < kNumJoints; ++j)
            CHECK(y2[static_cast<size_t>(j)] == doctest::Approx(2.5 * y[static_cast<size_t>(j)]).epsilon(1e-12));
    }

    CHECK_THROWS(aggregate(Vec{0.5, 0.5 + 3e-9}, {a, neg}));
    CHECK_THROWS(aggregate(Vec{1.5, -0.5}, {a, neg}));
    CHECK_THROWS(aggregate(Vec{1.0}, {a, neg}));
}

TEST_CASE("mixture forward reduces to the selected expert") {
    PolicyEnsemble ens = make_ensemble(small_config(1));
    ens.experts[0] = ens.base;
    Rng rng(16);
    const Vec o = random_vec(kObsDim, rng);
    const Vec z = random_vec(kZDim, rng);
    const Vec e_shape = random_vec(kShapeDim, rng);

    const PolicyOutput moe = policy_forward(ens, o, z, ForwardMode::moe, e_shape);
    const PolicyOutput base = policy_forward(ens, o, z, ForwardMode::base);
    CHECK(moe.mean == base.mean);
    CHECK(moe.value == base.value);
    CHECK(moe.log_std == base.log_std);
    REQUIRE(moe.gate_weights.size() == 1);
    CHECK(moe.gate_weights[0] == 1.0);

    PolicyEnsemble sw = make_ensemble(small_config(3, RouterMode::one_hot));
    const PolicyOutput routed = policy_forward(sw, o, z, ForwardMode::moe, e_shape);
    int hot = -1;
    for (int i = 0; i < 3; ++i)
        if (routed.gate_weights[static_cast<size_t>(i)] == 1.0)
            hot = i;
    REQUIRE(hot >= 0);
    const PolicyOutput picked = policy_net_forward(sw.experts[static_cast<size_t>(hot)], o, z);
    CHECK(routed.mean == picked.mean);
    CHECK(routed.value == picked.value);
}

TEST_CASE("mixture forward matches a manual weighted combination") {
    PolicyEnsemble ens = make_ensemble(small_config(4));
    Rng rng(17);
    const Vec o = random_vec(kObsDim, rng);
    const Vec z = random_vec(kZDim, rng);
    const Vec e_shape = random_vec(kShapeDim, rng);

    const PolicyOutput moe = policy_forward(ens, o, z, ForwardMode::moe, e_shape);
    const Vec w = gate_route(ens, gate_view_slice(ens, e_shape));
    REQUIRE(w.size() == 4);

    Vec mean(kNumJoints, 0.0), log_std(kNumJoints, 0.0);
    double value = 0.0;
    for (int i = 0; i < 4; ++i) {
        const PolicyOutput po = policy_net_forward(ens.experts[static_cast<size_t>(i)], o, z);
        for (int j = 0; j < kNumJoints; ++j) {
            mean[static_cast<size_t>(j)] += w[static_cast<size_t>(i)] * po.mean[static_cast<size_t>(j)];
            log_std[static_cast<size_t>(j)] += w[static_cast<size_t>(i)] * po.log_std[static_cast<size_t>(j)];
        }
        value += w[static_cast<size_t>(i)] * po.value;
    }
    for (int j = 0; j < kNumJoints; ++j) {
        CHECK(std::fabs(moe.mean[static_cast<size_t>(j)] - mean[static_cast<size_t>(j)]) <= 1e-15);
        CHECK(std::fabs(moe.log_std[static_cast<size_t>(j)] - log_std[static_cast<size_t>(j)]) <= 1e-15);
    }
    CHECK(std::fabs(moe.value - value) <= 1e-15);
}

TEST_CASE("identical experts make the mixture equal the base for any gate") {
    PolicyEnsemble ens = make_ensemble(small_config(3));
    for (auto& e : ens.experts)
        e = ens.base;
    Rng rng(18);
    const Vec o = random_vec(kObsDim, rng);
    const Vec z = random_vec(kZDim, rng);
    const Vec e_shape = random_vec(kShapeDim, rng);

    const PolicyOutput moe = policy_forward(ens, o, z, ForwardMode::moe, e_shape);
    const PolicyOutput base = policy_forward(ens, o, z, ForwardMode::base);
    for (int j = 0; j < kNumJoints; ++j)
        CHECK(moe.mean[static_cast<size_t>(j)] ==
              doctest::Approx(base.mean[static_cast<size_t>(j)]).epsilon(1e-14));
    CHECK(moe.value == doctest::Approx(base.value).epsilon(1e-14));
}

TEST_CASE("moe mode requires experts and a shape vector") {
    PolicyEnsemble none = make_ensemble(small_config(0));
    Rng rng(19);
    const Vec o = random_vec(kObsDim, rng);
    const Vec z = random_vec(kZDim, rng);
    CHECK_THROWS(policy_forward(none, o, z, ForwardMode::moe, random_vec(kShapeDim, rng)));

    PolicyEnsemble ens = make_ensemble(small_config(2));
    CHECK_THROWS(policy_forward(ens, o, z, ForwardMode::moe));
    CHECK_NOTHROW(policy_forward(ens, o, z, ForwardMode::base));
    CHECK_THROWS(policy_forward(ens, random_vec(65, rng), z, ForwardMode::base));
}

TEST_CASE("gate view selection slices the shape vector at construction") {
    Rng rng(20);
    Vec e_shape = random_vec(kShapeDim, rng);

    EnsembleConfig cfg = small_config(3);
    cfg.gate_view = kPcEmbedDim;
    PolicyEnsemble pc_only = make_ensemble(cfg);
    CHECK(pc_only.gate.input_dim() == kPcEmbedDim);
    const auto pc_slice = gate_view_slice(pc_only, e_shape);
    REQUIRE(pc_slice.size() == static_cast<size_t>(kPcEmbedDim));
    CHECK(pc_slice[0] == e_shape[0]);

    // Category bits do not influence a pc-only gate.
    const Vec w_before = gate_route(pc_only, pc_slice);
    e_shape[kPcEmbedDim + 2] = 1.0 - e_shape[kPcEmbedDim + 2];
    const Vec w_after = gate_route(pc_only, gate_view_slice(pc_only, e_shape));
    CHECK(w_before == w_after);

    cfg.gate_view = kNumCategories;
    PolicyEnsemble cat_only = make_ensemble(cfg);
    const auto cat_slice = gate_view_slice(cat_only, e_shape);
    REQUIRE(cat_slice.size() == static_cast<size_t>(kNumCategories));
    CHECK(cat_slice[0] == e_shape[kPcEmbedDim]);

    CHECK_THROWS(gate_route(cat_only, e_shape));  // full vector into a 6-wide gate

    cfg.gate_view = 17;
    CHECK_THROWS(make_ensemble(cfg));
}

TEST_CASE("action sampling is deterministic, clamped, and density-consistent") {
    Rng a(21), b(21);
    Vec mean(kNumJoints, 0.2);
    Vec log_std(kNumJoints, -0.5);
    const ActionSample s1 = sample_action(mean, log_std, a);
    const ActionSample s2 = sample_action(mean, log_std, b);
    CHECK(s1.raw == s2.raw);
    CHECK(s1.action == s2.action);
    CHECK(s1.log_prob == s2.log_prob);
    CHECK(s1.log_prob == gaussian_log_prob(mean, log_std, s1.raw));

    for (int j = 0; j < kNumJoints; ++j) {
        CHECK(s1.action[static_cast<size_t>(j)] >= -1.0);
        CHECK(s1.action[static_cast<size_t>(j)] <= 1.0);
    }

    Vec tight(kNumJoints, std::log(1e-12));
    Rng c(22);
    const ActionSample s3 = sample_action(mean, tight, c);
    for (int j = 0; j < kNumJoints; ++j)
        CHECK(std::fabs(s3.raw[static_cast<size_t>(j)] - 0.2) < 1e-10);

    Vec far(kNumJoints, 5.0);
    Rng d(23);
    const ActionSample s4 = sample_action(far, Vec(kNumJoints, -3.0), d);
    for (int j = 0; j < kNumJoints; ++j) {
        CHECK(s4.action[static_cast<size_t>(j)] == 1.0);
        CHECK(s4.raw[static_cast<size_t>(j)] > 1.0);
    }
    CHECK(s4.log_prob == gaussian_log_prob(far, Vec(kNumJoints, -3.0), s4.raw));
}

TEST_CASE("gaussian density matches closed forms") {
    const Vec mean(kNumJoints, 0.0);
    const Vec unit_ls(kNumJoints, 0.0);
    const double at_mean = gaussian_log_prob(mean, unit_ls, mean);
    CHECK(at_mean == doctest::Approx(-5.5 * std::log(2.0 * 3.14159265358979323846)).epsilon(1e-12));

    const Vec m1{0.0};
    const Vec ls1{0.0};
    const Vec x1{1.5};
    CHECK(gaussian_log_prob(m1, ls1, x1) ==
          doctest::Approx(-0.5 * 1.5 * 1.5 - 0.5 * std::log(2.0 * 3.14159265358979323846))
              .epsilon(1e-12));

    CHECK(gaussian_entropy(ls1) ==
          doctest::Approx(0.5 * (1.0 + std::log(2.0 * 3.14159265358979323846))).epsilon(1e-12));
    CHECK(gaussian_entropy(Vec{1.0}) ==
          doctest::Approx(1.0 + 0.5 * (1.0 + std::log(2.0 * 3.14159265358979323846)))
              .epsilon(1e-12));
}

TEST_CASE("action smoothing follows the exponential moving average") {
    SmootherState st;
    st.alpha = 1.0;
    Rng rng(24);
    const Vec a = random_vec(kNumJoints, rng);
    CHECK(smooth_action(st, a) == a);

    st.alpha = 0.0;
    st.prev.assign(kNumJoints, 0.3);
    const Vec frozen = smooth_action(st, a);
    for (const double v : frozen)
        CHECK(v == 0.3);

    st.alpha = 0.5;
    st.prev.assign(kNumJoints, 0.0);
    const Vec half = smooth_action(st, Vec(kNumJoints, 2.0));
    for (const double v : half)
        CHECK(v == 1.0);
    const Vec next = smooth_action(st, Vec(kNumJoints, 2.0));
    for (const double v : next)
        CHECK(v == 1.5);

    st.alpha = 1.5;
    CHECK_THROWS(smooth_action(st, a));
}

TEST_CASE("ensemble construction is deterministic with separated components") {
    const PolicyEnsemble a = make_ensemble(small_config(2));
    const PolicyEnsemble b = make_ensemble(small_config(2));
    CHECK(a.base.net.layers[0].w == b.base.net.layers[0].w);
    CHECK(a.experts[0].net.layers[0].w == b.experts[0].net.layers[0].w);
    CHECK(a.gate.layers[0].w == b.gate.layers[0].w);

    CHECK(a.base.net.layers[0].w != a.experts[0].net.layers[0].w);
    CHECK(a.experts[0].net.layers[0].w != a.experts[1].net.layers[0].w);
    CHECK(a.base.log_std == Vec(kNumJoints, 0.0));
    CHECK(a.gate.input_dim() == kShapeDim);
    CHECK(a.gate.output_dim() == 2);
    CHECK(a.mu_pc.input_dim() == kPcFeatureDim);
    CHECK(a.mu_e.input_dim() == kEPhysDim + kShapeDim);
    CHECK(a.mu_e.output_dim() == kZDim);

    EnsembleConfig other = small_config(2);
    other.seed = 78;
    const PolicyEnsemble c = make_ensemble(other);
    CHECK(a.base.net.layers[0].w != c.base.net.layers[0].w);
}
