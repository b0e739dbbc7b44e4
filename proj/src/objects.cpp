#include "dexmoe/objects.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace dexmoe {

namespace {

constexpr char kMagic[4] = {'D', 'X', 'O', 'B'};
constexpr uint32_t kVersion = 1;

constexpr int kJamJointCount = 4;

int jam_joint_base(int category) { return category == 4 ? 0 : 4; }

}  // namespace

const char* category_name(int category) {
    static const char* names[kNumCategories] = {"ball",   "block",    "shoe",
                                                "animal", "airplane", "train"};
    require(category >= 0 && category < kNumCategories, "category out of range");
    return names[category];
}

bool category_has_jam(int category) { return category == 4 || category == 5; }

Vec base_coupling(int category) {
    require(category >= 0 && category < kNumCategories, "category out of range");
    Vec b(static_cast<size_t>(kCouplingRows) * kNumJoints, 0.0);
    auto at = [&](int row, int joint) -> double& {
        return b[static_cast<size_t>(row) * kNumJoints + joint];
    };
    switch (category) {
        case 0:  // ball: near-identity response on the first three joints
            at(0, 0) = 0.8;
            at(1, 1) = 0.8;
            at(2, 2) = 0.8;
            break;
        case 1:  // block: mid joints with light cross terms
            at(0, 3) = 0.75;
            at(1, 4) = 0.75;
            at(2, 5) = 0.75;
            at(0, 4) = 0.1;
            at(1, 5) = 0.1;
            at(2, 3) = 0.1;
            break;
        case 2:  // shoe: rear joints, mixed signs
            at(0, 6) = 0.7;
            at(0, 7) = -0.3;
            at(1, 7) = 0.6;
            at(1, 8) = 0.3;
            at(2, 8) = -0.7;
            at(2, 6) = 0.2;
            break;
        case 3:  // animal: diffuse coupling across the hand
            at(0, 0) = 0.4;
            at(0, 3) = 0.4;
            at(0, 6) = 0.4;
            at(1, 1) = 0.4;
            at(1, 4) = -0.4;
            at(1, 7) = 0.4;
            at(2, 2) = 0.4;
            at(2, 5) = 0.4;
            at(2, 8) = -0.4;
            break;
        case 4:  // airplane: sign-flipped near-identity, jams on joints 0-3
            at(0, 0) = -0.8;
            at(1, 1) = -0.8;
            at(2, 2) = -0.8;
            break;
        case 5:  // train: response shifted onto joints 4-6, jams on joints 4-7
            at(0, 4) = 0.8;
            at(1, 5) = 0.8;
            at(2, 6) = 0.8;
            break;
    }
    return b;
}

Vec coupling_perturbation(std::span<const double> pc_feature) {
    require(pc_feature.size() >= static_cast<size_t>(kCouplingRows) * kNumJoints,
            "pc_feature too short");
    Vec a(static_cast<size_t>(kCouplingRows) * kNumJoints);
    for (size_t i = 0; i < a.size(); ++i)
        a[i] = 0.1 * pc_feature[i];
    return a;
}

void ObjectSpec::validate() const {
    require(id >= 0, "ObjectSpec: negative id");
    require(category >= 0 && category < kNumCategories, "ObjectSpec: category out of range");
    require(mass > 0.0, "ObjectSpec: non-positive mass");
    require(friction > 0.0 && friction <= 2.0, "ObjectSpec: friction outside (0, 2]");
    require(scale > 0.0 && scale <= 1.5, "ObjectSpec: scale outside (0, 1.5]");
    require(pc_feature.size() == kPcFeatureDim, "ObjectSpec: pc_feature size");
    require(coupling.size() == static_cast<size_t>(kCouplingRows) * kNumJoints,
            "ObjectSpec: coupling size");
    require(q_grasp.size() == kNumJoints, "ObjectSpec: q_grasp size");
    for (int r = 0; r < kCouplingRows; ++r) {
        double sq = 0.0;
        for (int j = 0; j < kNumJoints; ++j) {
            const double v = coupling[static_cast<size_t>(r) * kNumJoints + j];
            sq += v * v;
        }
        require(sq <= 1.0 + 1e-9, "ObjectSpec: coupling row norm exceeds 1");
    }
    if (has_jam) {
        require(jam_lo.size() == kNumJoints && jam_hi.size() == kNumJoints,
                "ObjectSpec: jam box size");
        for (int j = 0; j < kNumJoints; ++j)
            require(jam_lo[j] <= jam_hi[j], "ObjectSpec: inverted jam box");
        require(category_has_jam(category), "ObjectSpec: jam box on non-jam category");
    }
}

bool ObjectSpec::in_jam(std::span<const double> q) const {
    if (!has_jam)
        return false;
    for (int j = 0; j < kNumJoints; ++j)
        if (q[j] < jam_lo[j] || q[j] > jam_hi[j])
            return false;
    return true;
}

std::vector<ObjectSpec> generate_objects(int count, uint64_t seed) {
    require(count >= 1, "generate_objects: count must be >= 1");
    std::vector<ObjectSpec> out;
    out.reserve(count);

    std::array<Vec, kNumCategories> archetypes;
    for (int c = 0; c < kNumCategories; ++c) {
        Rng rng = Rng::stream(seed, {stream_tag::objects, 1000 + static_cast<uint64_t>(c)});
        archetypes[c].resize(kPcFeatureDim);
        for (double& v : archetypes[c])
            v = rng.uniform(-0.8, 0.8);
    }

    for (int id = 0; id < count; ++id) {
        Rng rng = Rng::stream(seed, {stream_tag::objects, static_cast<uint64_t>(id)});
        ObjectSpec o;
        o.id = id;
        o.category = id % kNumCategories;
        o.mass = rng.uniform(0.2, 0.3);
        for (double& c : o.com)
            c = rng.uniform(-0.01, 0.01);
        o.friction = rng.uniform(0.8, 1.2);
        o.scale = rng.uniform(0.6, 1.2);

        o.pc_feature.resize(kPcFeatureDim);
        const Vec& arch = archetypes[o.category];
        for (int i = 0; i < kPcFeatureDim; ++i)
            o.pc_feature[i] = std::clamp(arch[i] + rng.uniform(-0.25, 0.25), -1.0, 1.0);

        o.coupling = base_coupling(o.category);
        const Vec pert = coupling_perturbation(o.pc_feature);
        for (size_t i = 0; i < o.coupling.size(); ++i)
            o.coupling[i] += pert[i];
        for (int r = 0; r < kCouplingRows; ++r) {
            double sq = 0.0;
            for (int j = 0; j < kNumJoints; ++j)
                sq += o.coupling[static_cast<size_t>(r) * kNumJoints + j] *
                      o.coupling[static_cast<size_t>(r) * kNumJoints + j];
            if (sq > 1.0) {
                const double inv = 1.0 / std::sqrt(sq);
                for (int j = 0; j < kNumJoints; ++j)
                    o.coupling[static_cast<size_t>(r) * kNumJoints + j] *= inv;
            }
        }

        o.q_grasp.assign(kNumJoints, 0.0);
        o.has_jam = category_has_jam(o.category);
        if (o.has_jam) {
            const int base = jam_joint_base(o.category);
            for (int j = 0; j < kJamJointCount; ++j)
                o.q_grasp[base + j] = -0.85;
            o.jam_lo.assign(kNumJoints, -10.0);
            o.jam_hi.assign(kNumJoints, 10.0);
            for (int j = 0; j < kJamJointCount; ++j) {
                o.jam_lo[base + j] = 0.8;
                o.jam_hi[base + j] = 1.6;
            }
        }
        for (int j = 0; j < kNumJoints; ++j)
            o.q_grasp[j] += rng.uniform(-0.02, 0.02);

        o.validate();
        out.push_back(std::move(o));
    }
    return out;
}

int train_split_count(int total) { return 2 * total / 3; }

namespace {

void put_u32(std::string& buf, uint32_t v) { buf.append(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::string& buf, uint64_t v) { buf.append(reinterpret_cast<const char*>(&v), 8); }
void put_f64(std::string& buf, double v) { buf.append(reinterpret_cast<const char*>(&v), 8); }
void put_f64s(std::string& buf, std::span<const double> v) {
    buf.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;

    void need(size_t n) const { require(pos + n <= buf.size(), "object file truncated"); }
    uint32_t u32() {
        need(4);
        uint32_t v;
        std::memcpy(&v, buf.data() + pos, 4);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v;
        std::memcpy(&v, buf.data() + pos, 8);
        pos += 8;
        return v;
    }
    double f64() {
        need(8);
        double v;
        std::memcpy(&v, buf.data() + pos, 8);
        pos += 8;
        return v;
    }
    Vec f64s(size_t n) {
        need(n * 8);
        Vec v(n);
        std::memcpy(v.data(), buf.data() + pos, n * 8);
        pos += n * 8;
        return v;
    }
};

}  // namespace

void write_object_file(const std::string& path, const std::vector<ObjectSpec>& objects,
                       uint64_t seed) {
    std::string buf;
    buf.append(kMagic, 4);
    put_u32(buf, kVersion);
    put_u32(buf, static_cast<uint32_t>(objects.size()));
    put_u32(buf, static_cast<uint32_t>(train_split_count(static_cast<int>(objects.size()))));
    put_u64(buf, seed);

    for (const ObjectSpec& o : objects) {
        o.validate();
        put_u32(buf, static_cast<uint32_t>(o.id));
        put_u32(buf, static_cast<uint32_t>(o.category));
        put_f64(buf, o.mass);
        put_f64s(buf, o.com);
        put_f64(buf, o.friction);
        put_f64(buf, o.scale);
        put_f64s(buf, o.pc_feature);
        put_f64s(buf, o.coupling);
        put_f64s(buf, o.q_grasp);
        put_u32(buf, o.has_jam ? 1u : 0u);
        const Vec zeros(kNumJoints, 0.0);
        put_f64s(buf, o.has_jam ? o.jam_lo : zeros);
        put_f64s(buf, o.has_jam ? o.jam_hi : zeros);
    }
    put_u64(buf, fnv1a(buf.data(), buf.size()));

    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        require(f.good(), "cannot open object file for writing: " + path);
        f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        require(f.good(), "object file write failed: " + path);
    }
    std::filesystem::rename(tmp, path);
}

ObjectFile read_object_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "cannot open object file: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    require(buf.size() >= 4 + 4 + 4 + 4 + 8 + 8, "object file truncated");
    require(std::memcmp(buf.data(), kMagic, 4) == 0, "object file magic mismatch");

    uint64_t stored_sum;
    std::memcpy(&stored_sum, buf.data() + buf.size() - 8, 8);
    require(fnv1a(buf.data(), buf.size() - 8) == stored_sum, "object file checksum mismatch");

    Reader r{buf, 4};
    const uint32_t version = r.u32();
    require(version == kVersion, "object file version mismatch");
    ObjectFile out;
    const uint32_t count = r.u32();
    out.train_count = static_cast<int>(r.u32());
    out.seed = r.u64();

    out.objects.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        ObjectSpec o;
        o.id = static_cast<int>(r.u32());
        o.category = static_cast<int>(r.u32());
        o.mass = r.f64();
        const Vec com = r.f64s(3);
        std::copy(com.begin(), com.end(), o.com.begin());
        o.friction = r.f64();
        o.scale = r.f64();
        o.pc_feature = r.f64s(kPcFeatureDim);
        o.coupling = r.f64s(static_cast<size_t>(kCouplingRows) * kNumJoints);
        o.q_grasp = r.f64s(kNumJoints);
        o.has_jam = r.u32() != 0;
        Vec lo = r.f64s(kNumJoints);
        Vec hi = r.f64s(kNumJoints);
        if (o.has_jam) {
            o.jam_lo = std::move(lo);
            o.jam_hi = std::move(hi);
        }
        o.validate();
        out.objects.push_back(std::move(o));
    }
    require(r.pos == buf.size() - 8, "object file has trailing bytes");
    return out;
}

}  // namespace dexmoe
