#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dexmoe/common.hpp"
#include "dexmoe/rng.hpp"

namespace dexmoe {

inline constexpr int kNumJoints = 11;
inline constexpr int kNumCategories = 6;
inline constexpr int kPcFeatureDim = 100;
inline constexpr int kCouplingRows = 3;

// Categories 4 and 5 model protruding geometry that can lodge between the
// fingers; they carry jam regions in joint space.
const char* category_name(int category);
bool category_has_jam(int category);

struct ObjectSpec {
    int id = 0;
    int category = 0;
    double mass = 0.3;
    std::array<double, 3> com{};
    double friction = 1.0;
    double scale = 1.0;
    Vec pc_feature;  // [100]
    Vec coupling;    // row-major [3 x 11], row norms <= 1
    Vec q_grasp;     // [11]
    bool has_jam = false;
    Vec jam_lo, jam_hi;  // [11] box bounds when has_jam

    void validate() const;
    bool in_jam(std::span<const double> q) const;
};

// Per-category mean coupling before the per-object perturbation.
Vec base_coupling(int category);

// 0.1 x reshape(pc[0:33]) as a row-major 3 x 11 matrix.
Vec coupling_perturbation(std::span<const double> pc_feature);

// Deterministic per (seed, id): the spec for a given id does not depend on
// how many objects are generated alongside it. Categories cycle id % 6.
std::vector<ObjectSpec> generate_objects(int count, uint64_t seed);

// First two thirds of the ids are the training split, the rest held out.
int train_split_count(int total);

void write_object_file(const std::string& path, const std::vector<ObjectSpec>& objects,
                       uint64_t seed);

struct ObjectFile {
    uint64_t seed = 0;
    int train_count = 0;
    std::vector<ObjectSpec> objects;
};

ObjectFile read_object_file(const std::string& path);

}  // namespace dexmoe
