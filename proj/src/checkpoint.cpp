#include "dexmoe/checkpoint.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace dexmoe {

namespace {

constexpr char kMagic[4] = {'D', 'X', 'C', 'K'};
constexpr uint32_t kVersion = kCheckpointFormatVersion;

struct Writer {
    std::string buf;

    void raw(const void* p, size_t n) { buf.append(static_cast<const char*>(p), n); }
    void u8(uint8_t v) { raw(&v, sizeof v); }
    void u32(uint32_t v) { raw(&v, sizeof v); }
    void u64(uint64_t v) { raw(&v, sizeof v); }
    void i32(int32_t v) { raw(&v, sizeof v); }
    void i64(int64_t v) { raw(&v, sizeof v); }
    void f64(double v) { raw(&v, sizeof v); }
    void vec(const Vec& v) {
        u64(v.size());
        raw(v.data(), v.size() * sizeof(double));
    }
};

struct Reader {
    const char* data;
    size_t limit;
    size_t pos = 0;

    void need(size_t k) {
        if (k > limit - pos)
            throw std::runtime_error("checkpoint truncated");
    }
    void raw(void* p, size_t n) {
        need(n);
        std::memcpy(p, data + pos, n);
        pos += n;
    }
    uint8_t u8() {
        uint8_t v;
        raw(&v, sizeof v);
        return v;
    }
    uint32_t u32() {
        uint32_t v;
        raw(&v, sizeof v);
        return v;
    }
    uint64_t u64() {
        uint64_t v;
        raw(&v, sizeof v);
        return v;
    }
    int32_t i32() {
        int32_t v;
        raw(&v, sizeof v);
        return v;
    }
    int64_t i64() {
        int64_t v;
        raw(&v, sizeof v);
        return v;
    }
    double f64() {
        double v;
        raw(&v, sizeof v);
        return v;
    }
    Vec vec() {
        const uint64_t n = u64();
        if (n > (limit - pos) / sizeof(double))
            throw std::runtime_error("checkpoint truncated");
        Vec v(n);
        raw(v.data(), n * sizeof(double));
        return v;
    }
};

void put_net(Writer& w, const nn::DenseNet& net) {
    w.u32(static_cast<uint32_t>(net.layers.size()));
    for (const auto& l : net.layers) {
        w.u32(static_cast<uint32_t>(l.in));
        w.u32(static_cast<uint32_t>(l.out));
        w.u8(static_cast<uint8_t>(l.act));
        w.vec(l.w);
        w.vec(l.b);
    }
}

nn::DenseNet get_net(Reader& r) {
    nn::DenseNet net;
    const uint32_t n_layers = r.u32();
    net.layers.resize(n_layers);
    for (auto& l : net.layers) {
        l.in = static_cast<int>(r.u32());
        l.out = static_cast<int>(r.u32());
        const uint8_t act = r.u8();
        if (act > static_cast<uint8_t>(nn::Act::identity))
            throw std::runtime_error("checkpoint holds an unknown activation code");
        l.act = static_cast<nn::Act>(act);
        l.w = r.vec();
        l.b = r.vec();
    }
    if (!net.layers.empty())
        net.validate();
    return net;
}

void put_policy(Writer& w, const PolicyNet& p) {
    put_net(w, p.net);
    w.vec(p.log_std);
}

PolicyNet get_policy(Reader& r) {
    PolicyNet p;
    p.net = get_net(r);
    p.log_std = r.vec();
    if (p.log_std.size() != kNumJoints)
        throw std::runtime_error("checkpoint holds a policy with a malformed log-std");
    return p;
}

void put_adam(Writer& w, const nn::AdamState& s) {
    w.u32(static_cast<uint32_t>(s.m.size()));
    w.i64(s.step_count);
    for (size_t i = 0; i < s.m.size(); ++i) {
        w.vec(s.m[i]);
        w.vec(s.v[i]);
    }
}

nn::AdamState get_adam(Reader& r) {
    nn::AdamState s;
    const uint32_t n_blocks = r.u32();
    s.step_count = r.i64();
    s.m.resize(n_blocks);
    s.v.resize(n_blocks);
    for (uint32_t i = 0; i < n_blocks; ++i) {
        s.m[i] = r.vec();
        s.v[i] = r.vec();
        if (s.m[i].size() != s.v[i].size())
            throw std::runtime_error("checkpoint holds mismatched optimizer moments");
    }
    return s;
}

void put_slot(Writer& w, const EnvSlot& slot) {
    w.u64(slot.env_id);
    w.i32(slot.object_index);
    const EnvState& st = slot.state;
    w.vec(st.q);
    w.vec(st.q_vel);
    for (const double c : {st.rho.w, st.rho.x, st.rho.y, st.rho.z})
        w.f64(c);
    for (const double c : {st.goal.w, st.goal.x, st.goal.y, st.goal.z})
        w.f64(c);
    for (const double c : st.x)
        w.f64(c);
    for (const double c : st.v)
        w.f64(c);
    for (const double c : st.omega)
        w.f64(c);
    w.f64(st.h);
    w.i32(st.hold_counter);
    w.i32(st.success_count);
    w.i32(st.t);
    for (const Vec& q : st.q_hist)
        w.vec(q);
    for (const Vec& a : st.a_hist)
        w.vec(a);
    w.f64(slot.smoother.alpha);
    w.vec(slot.smoother.prev);
    for (const uint64_t word : slot.rng.state())
        w.u64(word);
}

EnvSlot get_slot(Reader& r) {
    EnvSlot slot;
    slot.env_id = r.u64();
    slot.object_index = r.i32();
    EnvState& st = slot.state;
    st.q = r.vec();
    st.q_vel = r.vec();
    st.rho = {r.f64(), r.f64(), r.f64(), r.f64()};
    st.goal = {r.f64(), r.f64(), r.f64(), r.f64()};
    for (double& c : st.x)
        c = r.f64();
    for (double& c : st.v)
        c = r.f64();
    for (double& c : st.omega)
        c = r.f64();
    st.h = r.f64();
    st.hold_counter = r.i32();
    st.success_count = r.i32();
    st.t = r.i32();
    for (Vec& q : st.q_hist)
        q = r.vec();
    for (Vec& a : st.a_hist)
        a = r.vec();
    slot.smoother.alpha = r.f64();
    slot.smoother.prev = r.vec();
    std::array<uint64_t, 4> words;
    for (uint64_t& word : words)
        word = r.u64();
    slot.rng.set_state(words);
    if (st.q.size() != kNumJoints || st.q_vel.size() != kNumJoints ||
        slot.smoother.prev.size() != kNumJoints)
        throw std::runtime_error("checkpoint holds an env state with malformed joints");
    return slot;
}

void check_congruence(CheckpointData& ck) {
    PolicyEnsemble& ens = ck.ens;
    if (ens.experts.size() != ck.bank.experts.size())
        throw std::runtime_error("checkpoint optimizer does not match its expert count");
    auto check = [](const nn::AdamState& s, const std::vector<std::span<double>>& blocks,
                    const char* what) {
        if (!s.congruent_with(blocks))
            throw std::runtime_error(std::string("checkpoint optimizer does not match ") + what);
    };
    check(ck.bank.mu_pc, nn::param_blocks(ens.mu_pc), "the point-cloud encoder");
    check(ck.bank.mu_e, nn::param_blocks(ens.mu_e), "the privileged encoder");
    check(ck.bank.base, policy_param_blocks(ens.base), "the base policy");
    for (size_t i = 0; i < ens.experts.size(); ++i)
        check(ck.bank.experts[i], policy_param_blocks(ens.experts[i]), "an expert policy");
    check(ck.bank.gate, nn::param_blocks(ens.gate), "the gate");
}

std::string encode(const CheckpointData& ck) {
    Writer w;
    w.raw(kMagic, sizeof kMagic);
    w.u32(kVersion);
    w.i32(static_cast<int32_t>(ck.stage));
    w.i32(ck.stage_unit);
    w.i32(ck.update_index);
    w.u64(ck.config_hash);
    w.u64(ck.objects_hash);
    w.f64(ck.lr);

    const PolicyEnsemble& ens = ck.ens;
    w.u32(static_cast<uint32_t>(ens.router_mode));
    w.u32(static_cast<uint32_t>(ens.topk_k));
    w.u32(static_cast<uint32_t>(ens.gate_view));
    w.u32(static_cast<uint32_t>(ens.experts.size()));
    put_net(w, ens.mu_pc);
    put_net(w, ens.mu_e);
    put_policy(w, ens.base);
    for (const PolicyNet& e : ens.experts)
        put_policy(w, e);
    put_net(w, ens.gate);

    put_adam(w, ck.bank.mu_pc);
    put_adam(w, ck.bank.mu_e);
    put_adam(w, ck.bank.base);
    for (const nn::AdamState& s : ck.bank.experts)
        put_adam(w, s);
    put_adam(w, ck.bank.gate);

    w.u64(ck.runtime_seed);
    w.f64(ck.smoothing_alpha);
    w.u32(static_cast<uint32_t>(ck.envs.size()));
    for (const EnvSlot& slot : ck.envs)
        put_slot(w, slot);

    for (const uint64_t word : ck.train_rng)
        w.u64(word);
    w.u32(static_cast<uint32_t>(ck.success_ring.size()));
    w.u32(ck.ring_cursor);
    for (const double s : ck.success_ring)
        w.f64(s);
    w.u64(ck.episodes_completed);

    w.u64(fnv1a(w.buf.data(), w.buf.size()));
    return std::move(w.buf);
}

CheckpointData decode(const std::string& buf) {
    if (buf.size() < sizeof kMagic + sizeof(uint32_t) + sizeof(uint64_t))
        throw std::runtime_error("checkpoint truncated");
    if (std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0)
        throw std::runtime_error("not a checkpoint file");
    const size_t payload = buf.size() - sizeof(uint64_t);
    uint64_t stored;
    std::memcpy(&stored, buf.data() + payload, sizeof stored);
    if (stored != fnv1a(buf.data(), payload))
        throw std::runtime_error("checkpoint checksum mismatch");

    Reader r{buf.data(), payload, sizeof kMagic};
    const uint32_t version = r.u32();
    if (version != kVersion)
        throw std::runtime_error("unsupported checkpoint version: " + std::to_string(version));

    CheckpointData ck;
    const int32_t stage = r.i32();
    if (stage < 0 || stage > static_cast<int32_t>(Stage::gate))
        throw std::runtime_error("checkpoint holds an unknown stage tag");
    ck.stage = static_cast<Stage>(stage);
    ck.stage_unit = r.i32();
    ck.update_index = r.i32();
    ck.config_hash = r.u64();
    ck.objects_hash = r.u64();
    ck.lr = r.f64();

    PolicyEnsemble& ens = ck.ens;
    const uint32_t router = r.u32();
    if (router > static_cast<uint32_t>(RouterMode::one_hot))
        throw std::runtime_error("checkpoint holds an unknown router mode");
    ens.router_mode = static_cast<RouterMode>(router);
    ens.topk_k = static_cast<int>(r.u32());
    ens.gate_view = static_cast<int>(r.u32());
    const uint32_t n_experts = r.u32();
    ens.mu_pc = get_net(r);
    ens.mu_e = get_net(r);
    ens.base = get_policy(r);
    ens.experts.resize(n_experts);
    for (PolicyNet& e : ens.experts)
        e = get_policy(r);
    ens.gate = get_net(r);

    ck.bank.mu_pc = get_adam(r);
    ck.bank.mu_e = get_adam(r);
    ck.bank.base = get_adam(r);
    ck.bank.experts.resize(n_experts);
    for (nn::AdamState& s : ck.bank.experts)
        s = get_adam(r);
    ck.bank.gate = get_adam(r);

    ck.runtime_seed = r.u64();
    ck.smoothing_alpha = r.f64();
    const uint32_t n_envs = r.u32();
    ck.envs.resize(n_envs);
    for (EnvSlot& slot : ck.envs)
        slot = get_slot(r);

    for (uint64_t& word : ck.train_rng)
        word = r.u64();
    const uint32_t ring_size = r.u32();
    ck.ring_cursor = r.u32();
    ck.success_ring.resize(ring_size);
    for (double& s : ck.success_ring)
        s = r.f64();
    ck.episodes_completed = r.u64();

    if (r.pos != payload)
        throw std::runtime_error("checkpoint has trailing bytes");
    check_congruence(ck);
    return ck;
}

}  // namespace

const char* stage_name(Stage s) {
    switch (s) {
        case Stage::base:
            return "base";
        case Stage::experts:
            return "experts";
        case Stage::gate:
            return "gate";
    }
    return "unknown";
}

uint64_t hash_objects(const std::vector<ObjectSpec>& objects) {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* p, size_t n) { h = fnv1a(p, n, h); };
    const uint64_t count = objects.size();
    mix(&count, sizeof count);
    for (const ObjectSpec& o : objects) {
        mix(&o.id, sizeof o.id);
        mix(&o.category, sizeof o.category);
        mix(&o.mass, sizeof o.mass);
        mix(o.com.data(), sizeof o.com);
        mix(&o.friction, sizeof o.friction);
        mix(&o.scale, sizeof o.scale);
        mix(o.pc_feature.data(), o.pc_feature.size() * sizeof(double));
        mix(o.coupling.data(), o.coupling.size() * sizeof(double));
        mix(o.q_grasp.data(), o.q_grasp.size() * sizeof(double));
        const uint8_t jam = o.has_jam ? 1 : 0;
        mix(&jam, sizeof jam);
        mix(o.jam_lo.data(), o.jam_lo.size() * sizeof(double));
        mix(o.jam_hi.data(), o.jam_hi.size() * sizeof(double));
    }
    return h;
}

void write_file_atomic(const std::string& path, std::string_view bytes) {
    const std::string tmp = path + ".tmp";
    const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    if (fd < 0)
        throw std::runtime_error("cannot write file: " + tmp);
    size_t written = 0;
    while (written < bytes.size()) {
        const ssize_t n = ::write(fd, bytes.data() + written, bytes.size() - written);
        if (n <= 0) {
            ::close(fd);
            std::remove(tmp.c_str());
            throw std::runtime_error("cannot write file: " + tmp);
        }
        written += static_cast<size_t>(n);
    }
    if (::fsync(fd) != 0 || ::close(fd) != 0) {
        std::remove(tmp.c_str());
        throw std::runtime_error("cannot write file: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        std::remove(tmp.c_str());
        throw std::runtime_error("cannot move file into place: " + path);
    }
}

void save_checkpoint(const std::string& path, const CheckpointData& ck) {
    write_file_atomic(path, encode(ck));
}

CheckpointData load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::runtime_error("cannot open checkpoint file: " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode(bytes);
}

}  // namespace dexmoe
