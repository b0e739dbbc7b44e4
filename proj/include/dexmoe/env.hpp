#pragma once

#include <array>
#include <optional>
#include <string>

#include "dexmoe/objects.hpp"
#include "dexmoe/quat.hpp"

namespace dexmoe {

inline constexpr int kObsDim = 66;     // 3 joint frames + 3 action frames, 11 each
inline constexpr int kEPhysDim = 19;   // m, com, f, s, x, q_rel, v, omega

struct RewardCoeffs {
    double c_success = 800.0;
    double c_dist = -10.0;
    double c_rot = -1.0;
    double eps = 0.1;
    double c_omega = -0.01;
    double omega_clip = 5.0;
    double c_action = -0.0002;
};

struct RewardTerms {
    double r1 = 0.0;
    double r2 = 0.0;
    double r3 = 0.0;
    double total = 0.0;
};

// r1 = c_success when reached; r2 penalizes distance and rewards/penalizes
// closeness in angle via c_rot / (|dtheta| + eps); r3 hinges joint speeds
// above omega_clip and adds c_action * |a|^2.
RewardTerms compute_reward(double dist, double dtheta, std::span<const double> joint_vels,
                           std::span<const double> action, bool reached, const RewardCoeffs& c);

struct SuccessThresholds {
    double tau_theta = 0.1;
    double tau_q = 10.0;
    double tau_v = 0.04;
    double tau_omega = 0.5;
    int hold_window = 5;
};

struct EnvConfig {
    double dt = 1.0 / 60.0;
    int episode_length = 600;
    double kp = 20.0;
    double qd_max = 10.0;
    double joint_limit = 1.6;
    double lambda_jam = 0.5;
    double lambda_drift = 0.02;
    double v_drop = 0.5;
    double drop_dist = 0.1;
    double grasp_noise = 0.02;
    SuccessThresholds success;
    RewardCoeffs reward;
};

struct EnvState {
    Vec q;       // [11]
    Vec q_vel;   // [11]
    Quat rho;    // object orientation
    Quat goal;
    std::array<double, 3> x{};
    std::array<double, 3> v{};
    std::array<double, 3> omega{};
    double h = 1.0;  // grasp integrity
    int hold_counter = 0;
    int success_count = 0;
    int t = 0;
    std::array<Vec, 2> q_hist;  // q_{t-2}, q_{t-1}
    std::array<Vec, 3> a_hist;  // a_{t-3}, a_{t-2}, a_{t-1}
};

struct StepResult {
    Vec observation;  // [66]
    Vec e_phys;       // [19]
    RewardTerms reward;
    bool reached = false;  // success registered this step
    bool dropped = false;
    bool terminal = false;
    bool reached_now = false;  // instantaneous four-condition check
    bool in_jam = false;
    double dtheta = 0.0;  // angle to the goal that was active during the step
    double dist = 0.0;
};

struct SuccessCheck {
    bool reached_now = false;
    bool registered = false;
};

// Increments or resets the hold counter from the current state; on a full
// hold window, registers one success, bumps S, and samples a fresh goal.
SuccessCheck check_success(EnvState& st, const SuccessThresholds& th, Rng& rng);

EnvState env_reset(const ObjectSpec& obj, const EnvConfig& cfg, Rng& rng);

Vec observation(const EnvState& st);

// [m, com, f, s, x, q_rel, v, omega] where q_rel is the object orientation
// expressed in the goal frame (w >= 0), so the target is q_rel = identity.
Vec e_phys(const EnvState& st, const ObjectSpec& obj);

struct TrajectoryRecorder;

StepResult env_step(EnvState& st, const ObjectSpec& obj, const EnvConfig& cfg,
                    std::span<const double> a_bar, Rng& rng,
                    TrajectoryRecorder* rec = nullptr);

// Per-episode binary log with enough state per step to recount successes
// offline without the environment.
struct TrajectoryRecord {
    uint32_t t = 0;
    Vec q;        // [11]
    Vec q_vel;    // [11]
    Quat rho;     // post-step orientation
    Quat goal;    // goal active during the step (pre-resample)
    std::array<double, 3> x{};
    std::array<double, 3> v{};
    std::array<double, 3> omega{};
    double h = 0.0;
    double reward = 0.0;
    uint32_t flags = 0;  // bit 0 reached_now, 1 registered, 2 dropped, 3 terminal, 4 jam
    uint32_t s_after = 0;
};

struct TrajectoryRecorder {
    SuccessThresholds thresholds;
    uint32_t object_id = 0;
    std::vector<TrajectoryRecord> records;
};

void write_trajectory_log(const std::string& path, const TrajectoryRecorder& rec);
TrajectoryRecorder read_trajectory_log(const std::string& path);

struct RecountResult {
    int successes = 0;
    std::vector<bool> registered;  // per step
    bool matches_log = true;       // flags and counters agree with the log
};

// Replays the stored per-step state through the success rules in the log
// header and compares against the online bookkeeping captured in the flags.
RecountResult recount_trajectory(const TrajectoryRecorder& rec);

}  // namespace dexmoe
