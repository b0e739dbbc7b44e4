#include "dexmoe/objects.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace dexmoe;

namespace {

bool specs_equal(const ObjectSpec& a, const ObjectSpec& b) {
    return a.id == b.id && a.category == b.category && a.mass == b.mass && a.com == b.com &&
           a.friction == b.friction && a.scale == b.scale && a.pc_feature == b.pc_feature &&
           a.coupling == b.coupling && a.q_grasp == b.q_grasp && a.has_jam == b.has_jam &&
           a.jam_lo == b.jam_lo && a.jam_hi == b.jam_hi;
}

std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("object generation is deterministic per seed and id") {
    const auto a = generate_objects(150, 42);
    const auto b = generate_objects(150, 42);
    REQUIRE(a.size() == 150);
    for (size_t i = 0; i < a.size(); ++i)
        CHECK(specs_equal(a[i], b[i]));

    // An object's spec does not depend on how many neighbours were generated.
    const auto prefix = generate_objects(10, 42);
    for (size_t i = 0; i < prefix.size(); ++i)
        CHECK(specs_equal(prefix[i], a[i]));

    const auto other_seed = generate_objects(10, 43);
    bool any_diff = false;
    for (size_t i = 0; i < other_seed.size(); ++i)
        any_diff |= !specs_equal(other_seed[i], a[i]);
    CHECK(any_diff);
}

TEST_CASE("object set covers categories round-robin with a 100/50 split") {
    const auto objs = generate_objects(150, 7);
    int per_category[kNumCategories] = {};
    for (const auto& o : objs) {
        CHECK(o.category == o.id % kNumCategories);
        per_category[o.category] += 1;
    }
    for (int c = 0; c < kNumCategories; ++c)
        CHECK(per_category[c] == 25);
    CHECK(train_split_count(150) == 100);
}

TEST_CASE("generated objects satisfy their invariants") {
    const auto objs = generate_objects(60, 11);
    for (const auto& o : objs) {
        o.validate();
        CHECK(o.mass > 0.0);
        CHECK(o.friction > 0.0);
        CHECK(o.friction <= 2.0);
        CHECK(o.scale > 0.0);
        CHECK(o.scale <= 1.5);
        for (double p : o.pc_feature) {
            CHECK(p >= -1.0);
            CHECK(p <= 1.0);
        }
        for (int r = 0; r < kCouplingRows; ++r) {
            double sq = 0.0;
            for (int j = 0; j < kNumJoints; ++j)
                sq += o.coupling[r * kNumJoints + j] * o.coupling[r * kNumJoints + j];
            CHECK(sq <= 1.0 + 1e-9);
        }
        CHECK(o.has_jam == category_has_jam(o.category));
        CHECK(o.has_jam == (o.category == 4 || o.category == 5));
    }
}

TEST_CASE("coupling perturbation has the stated scale") {
    const auto objs = generate_objects(12, 3);
    for (const auto& o : objs) {
        const Vec pert = coupling_perturbation(o.pc_feature);
        double pert_sq = 0.0, pc_sq = 0.0;
        for (size_t i = 0; i < pert.size(); ++i) {
            pert_sq += pert[i] * pert[i];
            pc_sq += o.pc_feature[i] * o.pc_feature[i];
        }
        CHECK(std::sqrt(pert_sq) ==
              doctest::Approx(0.1 * std::sqrt(pc_sq)).epsilon(1e-12));
        CHECK(std::sqrt(pert_sq) <= 0.1 * std::sqrt(pc_sq) + 1e-12);
    }
}

TEST_CASE("jam membership respects the box") {
    const auto objs = generate_objects(12, 9);
    const ObjectSpec* jam = nullptr;
    const ObjectSpec* ball = nullptr;
    for (const auto& o : objs) {
        if (o.category == 4 && !jam)
            jam = &o;
        if (o.category == 0 && !ball)
            ball = &o;
    }
    REQUIRE(jam != nullptr);
    REQUIRE(ball != nullptr);

    Vec q(kNumJoints, 0.0);
    CHECK_FALSE(jam->in_jam(q));
    for (int j = 0; j < 4; ++j)
        q[j] = 1.2;
    CHECK(jam->in_jam(q));
    q[2] = 0.5;
    CHECK_FALSE(jam->in_jam(q));
    CHECK_FALSE(ball->in_jam(q));
}

TEST_CASE("object file round-trips byte for byte") {
    const auto objs = generate_objects(30, 77);
    const std::string path = temp_path("dexmoe_objects_test.bin");
    write_object_file(path, objs, 77);

    const ObjectFile loaded = read_object_file(path);
    CHECK(loaded.seed == 77);
    CHECK(loaded.train_count == train_split_count(30));
    REQUIRE(loaded.objects.size() == objs.size());
    for (size_t i = 0; i < objs.size(); ++i)
        CHECK(specs_equal(loaded.objects[i], objs[i]));

    const std::string again = temp_path("dexmoe_objects_test2.bin");
    write_object_file(again, loaded.objects, loaded.seed);
    std::ifstream fa(path, std::ios::binary), fb(again, std::ios::binary);
    const std::string ba((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    const std::string bb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    CHECK(ba == bb);

    std::remove(path.c_str());
    std::remove(again.c_str());
}

TEST_CASE("object file rejects corruption") {
    const auto objs = generate_objects(6, 5);
    const std::string path = temp_path("dexmoe_objects_corrupt.bin");
    write_object_file(path, objs, 5);

    std::ifstream f(path, std::ios::binary);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    f.close();

    {
        std::ofstream trunc(path, std::ios::binary | std::ios::trunc);
        trunc.write(buf.data(), static_cast<std::streamsize>(buf.size() / 2));
    }
    CHECK_THROWS(read_object_file(path));

    std::string flipped = buf;
    flipped[20] = static_cast<char>(flipped[20] ^ 0x5a);
    {
        std::ofstream bad(path, std::ios::binary | std::ios::trunc);
        bad.write(flipped.data(), static_cast<std::streamsize>(flipped.size()));
    }
    CHECK_THROWS(read_object_file(path));

    std::string badmagic = buf;
    badmagic[0] = 'X';
    {
        std::ofstream bad(path, std::ios::binary | std::ios::trunc);
        bad.write(badmagic.data(), static_cast<std::streamsize>(badmagic.size()));
    }
    CHECK_THROWS(read_object_file(path));

    std::remove(path.c_str());
}
