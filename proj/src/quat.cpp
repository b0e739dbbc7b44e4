#include "dexmoe/quat.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dexmoe/common.hpp"

namespace dexmoe {

Quat quat_mul(const Quat& a, const Quat& b) {
    return Quat{
        a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
        a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
        a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
    };
}

Quat quat_conj(const Quat& q) { return Quat{q.w, -q.x, -q.y, -q.z}; }

double quat_norm(const Quat& q) {
    return std::sqrt(q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z);
}

Quat quat_normalize(const Quat& q) {
    const double n = quat_norm(q);
    require(n > 1e-12, "quat_normalize: near-zero quaternion");
    const double inv = 1.0 / n;
    return Quat{q.w * inv, q.x * inv, q.y * inv, q.z * inv};
}

Quat exp_map(const Vec3& v) {
    const double angle = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    double k;  // sin(angle/2) / angle
    if (angle < 1e-8) {
        k = 0.5 - angle * angle / 48.0;
    } else {
        k = std::sin(0.5 * angle) / angle;
    }
    return Quat{std::cos(0.5 * angle), k * v[0], k * v[1], k * v[2]};
}

Vec3 rotate(const Quat& q, const Vec3& v) {
    // v' = v + 2 w (u x v) + 2 u x (u x v), u = vector part
    const Vec3 u{q.x, q.y, q.z};
    const Vec3 uv{u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2],
                  u[0] * v[1] - u[1] * v[0]};
    const Vec3 uuv{u[1] * uv[2] - u[2] * uv[1], u[2] * uv[0] - u[0] * uv[2],
                   u[0] * uv[1] - u[1] * uv[0]};
    return Vec3{v[0] + 2.0 * (q.w * uv[0] + uuv[0]), v[1] + 2.0 * (q.w * uv[1] + uuv[1]),
                v[2] + 2.0 * (q.w * uv[2] + uuv[2])};
}

double quat_angle(const Quat& a, const Quat& b) {
    require(std::fabs(quat_norm(a) - 1.0) <= 1e-6, "quat_angle: first argument not unit");
    require(std::fabs(quat_norm(b) - 1.0) <= 1e-6, "quat_angle: second argument not unit");
    const double d = std::fabs(a.w * b.w + a.x * b.x + a.y * b.y + a.z * b.z);
    return 2.0 * std::acos(std::min(d, 1.0));
}

Quat sample_uniform_so3(Rng& rng) {
    const double u1 = rng.uniform();
    const double u2 = rng.uniform();
    const double u3 = rng.uniform();
    const double a = std::sqrt(1.0 - u1);
    const double b = std::sqrt(u1);
    const double t2 = 2.0 * std::numbers::pi * u2;
    const double t3 = 2.0 * std::numbers::pi * u3;
    return Quat{b * std::cos(t3), a * std::sin(t2), a * std::cos(t2), b * std::sin(t3)};
}

}  // namespace dexmoe
