#pragma once

#include <array>

#include "dexmoe/rng.hpp"

namespace dexmoe {

struct Quat {
    double w = 1.0, x = 0.0, y = 0.0, z = 0.0;
};

using Vec3 = std::array<double, 3>;

Quat quat_mul(const Quat& a, const Quat& b);
Quat quat_conj(const Quat& q);
double quat_norm(const Quat& q);

// Throws if the norm is too small to normalize meaningfully.
Quat quat_normalize(const Quat& q);

// Unit quaternion for a rotation of |v| radians about v / |v|; exact at the
// small-angle limit via a series branch.
Quat exp_map(const Vec3& v);

Vec3 rotate(const Quat& q, const Vec3& v);

// Rotation distance on the quotient SO(3): 2 acos(|<a, b>|), in [0, pi].
// Antipodal pairs compare equal. Throws if either input is further than
// 1e-6 from unit norm.
double quat_angle(const Quat& a, const Quat& b);

// Haar-uniform unit quaternion (subgroup algorithm); consumes exactly three
// uniform draws.
Quat sample_uniform_so3(Rng& rng);

}  // namespace dexmoe
