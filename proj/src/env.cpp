#include "dexmoe/env.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace dexmoe {

namespace {

constexpr char kLogMagic[4] = {'D', 'X', 'T', 'L'};
constexpr uint32_t kLogVersion = 1;

// Diameter of the reachable joint box, used to normalize grasp distance.
const double kGraspDiameter = 2.0 * std::sqrt(11.0);

double norm3(const std::array<double, 3>& v) {
    return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
}

Quat goal_relative(const Quat& goal, const Quat& rho) {
    Quat rel = quat_normalize(quat_mul(quat_conj(goal), rho));
    if (rel.w < 0.0)
        rel = Quat{-rel.w, -rel.x, -rel.y, -rel.z};
    return rel;
}

bool reached_conditions(double dtheta, std::span<const double> q_vel,
                        const std::array<double, 3>& v, const std::array<double, 3>& omega,
                        const SuccessThresholds& th) {
    if (dtheta > th.tau_theta)
        return false;
    for (double qd : q_vel)
        if (std::fabs(qd) >= th.tau_q)
            return false;
    if (norm3(v) >= th.tau_v)
        return false;
    return norm3(omega) <= th.tau_omega;
}

}  // namespace

RewardTerms compute_reward(double dist, double dtheta, std::span<const double> joint_vels,
                           std::span<const double> action, bool reached, const RewardCoeffs& c) {
    RewardTerms r;
    r.r1 = reached ? c.c_success : 0.0;
    r.r2 = c.c_dist * std::fabs(dist) + c.c_rot / (std::fabs(dtheta) + c.eps);
    double hinge = 0.0;
    for (double w : joint_vels)
        hinge += std::max(std::fabs(w) - c.omega_clip, 0.0);
    double a_sq = 0.0;
    for (double a : action)
        a_sq += a * a;
    r.r3 = c.c_omega * hinge + c.c_action * a_sq;
    r.total = r.r1 + r.r2 + r.r3;
    return r;
}

SuccessCheck check_success(EnvState& st, const SuccessThresholds& th, Rng& rng) {
    require(th.tau_theta > 0 && th.tau_q > 0 && th.tau_v > 0 && th.tau_omega > 0,
            "check_success: thresholds must be positive");
    SuccessCheck out;
    const double dtheta = quat_angle(st.rho, st.goal);
    out.reached_now = reached_conditions(dtheta, st.q_vel, st.v, st.omega, th);
    if (out.reached_now) {
        st.hold_counter += 1;
        if (st.hold_counter == th.hold_window) {
            out.registered = true;
            st.success_count += 1;
            st.goal = sample_uniform_so3(rng);
            st.hold_counter = 0;
        }
    } else {
        st.hold_counter = 0;
    }
    return out;
}

EnvState env_reset(const ObjectSpec& obj, const EnvConfig& cfg, Rng& rng) {
    EnvState st;
    st.q.resize(kNumJoints);
    for (int j = 0; j < kNumJoints; ++j)
        st.q[j] = std::clamp(obj.q_grasp[j] + rng.uniform(-cfg.grasp_noise, cfg.grasp_noise),
                             -cfg.joint_limit, cfg.joint_limit);
    st.q_vel.assign(kNumJoints, 0.0);
    st.rho = sample_uniform_so3(rng);
    st.goal = sample_uniform_so3(rng);
    st.h = 1.0;
    st.q_hist[0] = st.q;
    st.q_hist[1] = st.q;
    for (auto& a : st.a_hist)
        a.assign(kNumJoints, 0.0);
    return st;
}

Vec observation(const EnvState& st) {
    Vec o;
    o.reserve(kObsDim);
    o.insert(o.end(), st.q_hist[0].begin(), st.q_hist[0].end());
    o.insert(o.end(), st.q_hist[1].begin(), st.q_hist[1].end());
    o.insert(o.end(), st.q.begin(), st.q.end());
    for (const Vec& a : st.a_hist)
        o.insert(o.end(), a.begin(), a.end());
    return o;
}

Vec e_phys(const EnvState& st, const ObjectSpec& obj) {
    Vec e;
    e.reserve(kEPhysDim);
    e.push_back(obj.mass);
    e.insert(e.end(), obj.com.begin(), obj.com.end());
    e.push_back(obj.friction);
    e.push_back(obj.scale);
    e.insert(e.end(), st.x.begin(), st.x.end());
    const Quat rel = goal_relative(st.goal, st.rho);
    e.push_back(rel.w);
    e.push_back(rel.x);
    e.push_back(rel.y);
    e.push_back(rel.z);
    e.insert(e.end(), st.v.begin(), st.v.end());
    e.insert(e.end(), st.omega.begin(), st.omega.end());
    return e;
}

StepResult env_step(EnvState& st, const ObjectSpec& obj, const EnvConfig& cfg,
                    std::span<const double> a_bar, Rng& rng, TrajectoryRecorder* rec) {
    require(a_bar.size() == kNumJoints, "env_step: action size mismatch");
    require(all_finite(a_bar), "env_step: non-finite action");
    require(st.t < cfg.episode_length, "env_step: episode already over");

    Vec cmd(a_bar.begin(), a_bar.end());
    for (double& a : cmd)
        a = std::clamp(a, -1.0, 1.0);

    st.q_hist[0] = st.q_hist[1];
    st.q_hist[1] = st.q;
    for (int j = 0; j < kNumJoints; ++j) {
        st.q_vel[j] = std::clamp(cfg.kp * (cmd[j] - st.q[j]), -cfg.qd_max, cfg.qd_max);
        st.q[j] = std::clamp(st.q[j] + st.q_vel[j] * cfg.dt, -cfg.joint_limit, cfg.joint_limit);
    }
    st.a_hist[0] = st.a_hist[1];
    st.a_hist[1] = st.a_hist[2];
    st.a_hist[2] = cmd;

    const bool jam = obj.in_jam(st.q);
    if (jam) {
        st.omega = {0.0, 0.0, 0.0};
    } else {
        const double gain = obj.friction / obj.mass;
        for (int r = 0; r < kCouplingRows; ++r) {
            double s = 0.0;
            for (int j = 0; j < kNumJoints; ++j)
                s += obj.coupling[static_cast<size_t>(r) * kNumJoints + j] * st.q_vel[j];
            st.omega[r] = gain * s;
        }
        if (st.omega[0] != 0.0 || st.omega[1] != 0.0 || st.omega[2] != 0.0)
            st.rho = quat_normalize(quat_mul(
                st.rho, exp_map(Vec3{st.omega[0] * cfg.dt, st.omega[1] * cfg.dt,
                                     st.omega[2] * cfg.dt})));
    }
    double grasp_dist_sq = 0.0;
    for (int j = 0; j < kNumJoints; ++j)
        grasp_dist_sq += (st.q[j] - obj.q_grasp[j]) * (st.q[j] - obj.q_grasp[j]);
    const double g = 1.0 - std::sqrt(grasp_dist_sq) / kGraspDiameter;
    st.h = std::clamp(
        st.h + cfg.dt * (g - (jam ? cfg.lambda_jam : 0.0) - cfg.lambda_drift), 0.0, 1.0);

    if (st.h <= 0.0) {
        st.v = {0.0, 0.0, -cfg.v_drop};
    } else {
        st.v = {0.0, 0.0, 0.0};
    }
    for (int i = 0; i < 3; ++i)
        st.x[i] += st.v[i] * cfg.dt;

    StepResult out;
    out.in_jam = jam;
    out.dist = norm3(st.x);
    out.dropped = out.dist > cfg.drop_dist;
    out.dtheta = quat_angle(st.rho, st.goal);

    const Quat goal_during_step = st.goal;
    const SuccessCheck sc = check_success(st, cfg.success, rng);
    out.reached_now = sc.reached_now;
    out.reached = sc.registered;

    out.reward = compute_reward(out.dist, out.dtheta, st.q_vel, cmd, out.reached, cfg.reward);

    st.t += 1;
    out.terminal = out.dropped || st.t >= cfg.episode_length;
    out.observation = observation(st);
    out.e_phys = e_phys(st, obj);

    if (rec) {
        TrajectoryRecord r;
        r.t = static_cast<uint32_t>(st.t - 1);
        r.q = st.q;
        r.q_vel = st.q_vel;
        r.rho = st.rho;
        r.goal = goal_during_step;
        r.x = st.x;
        r.v = st.v;
        r.omega = st.omega;
        r.h = st.h;
        r.reward = out.reward.total;
        r.flags = (out.reached_now ? 1u : 0u) | (out.reached ? 2u : 0u) |
                  (out.dropped ? 4u : 0u) | (out.terminal ? 8u : 0u) | (jam ? 16u : 0u);
        r.s_after = static_cast<uint32_t>(st.success_count);
        rec->records.push_back(std::move(r));
    }
    return out;
}

namespace {

void put_bytes(std::string& buf, const void* p, size_t n) {
    buf.append(static_cast<const char*>(p), n);
}

template <typename T>
void put(std::string& buf, const T& v) {
    put_bytes(buf, &v, sizeof(T));
}

struct LogReader {
    const std::string& buf;
    size_t pos = 0;
    template <typename T>
    T get() {
        require(pos + sizeof(T) <= buf.size(), "trajectory log truncated");
        T v;
        std::memcpy(&v, buf.data() + pos, sizeof(T));
        pos += sizeof(T);
        return v;
    }
    Vec vec(size_t n) {
        require(pos + n * 8 <= buf.size(), "trajectory log truncated");
        Vec v(n);
        std::memcpy(v.data(), buf.data() + pos, n * 8);
        pos += n * 8;
        return v;
    }
};

}  // namespace

void write_trajectory_log(const std::string& path, const TrajectoryRecorder& rec) {
    std::string buf;
    buf.append(kLogMagic, 4);
    put(buf, kLogVersion);
    put(buf, rec.object_id);
    put(buf, rec.thresholds.tau_theta);
    put(buf, rec.thresholds.tau_q);
    put(buf, rec.thresholds.tau_v);
    put(buf, rec.thresholds.tau_omega);
    put(buf, static_cast<uint32_t>(rec.thresholds.hold_window));
    put(buf, static_cast<uint32_t>(rec.records.size()));
    for (const TrajectoryRecord& r : rec.records) {
        put(buf, r.t);
        put_bytes(buf, r.q.data(), r.q.size() * 8);
        put_bytes(buf, r.q_vel.data(), r.q_vel.size() * 8);
        put(buf, r.rho);
        put(buf, r.goal);
        put(buf, r.x);
        put(buf, r.v);
        put(buf, r.omega);
        put(buf, r.h);
        put(buf, r.reward);
        put(buf, r.flags);
        put(buf, r.s_after);
    }
    put(buf, fnv1a(buf.data(), buf.size()));

    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        require(f.good(), "cannot open trajectory log for writing: " + path);
        f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        require(f.good(), "trajectory log write failed: " + path);
    }
    std::filesystem::rename(tmp, path);
}

TrajectoryRecorder read_trajectory_log(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "cannot open trajectory log: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    require(buf.size() >= 12, "trajectory log truncated");
    require(std::memcmp(buf.data(), kLogMagic, 4) == 0, "trajectory log magic mismatch");
    uint64_t stored_sum;
    std::memcpy(&stored_sum, buf.data() + buf.size() - 8, 8);
    require(fnv1a(buf.data(), buf.size() - 8) == stored_sum, "trajectory log checksum mismatch");

    LogReader r{buf, 4};
    require(r.get<uint32_t>() == kLogVersion, "trajectory log version mismatch");
    TrajectoryRecorder rec;
    rec.object_id = r.get<uint32_t>();
    rec.thresholds.tau_theta = r.get<double>();
    rec.thresholds.tau_q = r.get<double>();
    rec.thresholds.tau_v = r.get<double>();
    rec.thresholds.tau_omega = r.get<double>();
    rec.thresholds.hold_window = static_cast<int>(r.get<uint32_t>());
    const uint32_t count = r.get<uint32_t>();
    rec.records.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        TrajectoryRecord t;
        t.t = r.get<uint32_t>();
        t.q = r.vec(kNumJoints);
        t.q_vel = r.vec(kNumJoints);
        t.rho = r.get<Quat>();
        t.goal = r.get<Quat>();
        t.x = r.get<std::array<double, 3>>();
        t.v = r.get<std::array<double, 3>>();
        t.omega = r.get<std::array<double, 3>>();
        t.h = r.get<double>();
        t.reward = r.get<double>();
        t.flags = r.get<uint32_t>();
        t.s_after = r.get<uint32_t>();
        rec.records.push_back(std::move(t));
    }
    require(r.pos == buf.size() - 8, "trajectory log has trailing bytes");
    return rec;
}

RecountResult recount_trajectory(const TrajectoryRecorder& rec) {
    RecountResult out;
    out.registered.reserve(rec.records.size());
    int hold = 0;
    for (const TrajectoryRecord& r : rec.records) {
        const double dtheta = quat_angle(r.rho, r.goal);
        const bool now = reached_conditions(dtheta, r.q_vel, r.v, r.omega, rec.thresholds);
        bool registered = false;
        if (now) {
            hold += 1;
            if (hold == rec.thresholds.hold_window) {
                registered = true;
                out.successes += 1;
                hold = 0;
            }
        } else {
            hold = 0;
        }
        out.registered.push_back(registered);
        const bool logged_now = (r.flags & 1u) != 0;
        const bool logged_reg = (r.flags & 2u) != 0;
        if (logged_now != now || logged_reg != registered ||
            r.s_after != static_cast<uint32_t>(out.successes))
            out.matches_log = false;
    }
    return out;
}

}  // namespace dexmoe
