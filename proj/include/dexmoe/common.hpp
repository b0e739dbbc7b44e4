#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dexmoe {

using Vec = std::vector<double>;

inline void require(bool cond, const std::string& msg) {
    if (!cond)
        throw std::invalid_argument(msg);
}

inline bool all_finite(std::span<const double> xs) {
    for (double x : xs)
        if (!std::isfinite(x))
            return false;
    return true;
}

// FNV-1a, used for config hashes, checkpoint checksums and freeze audits.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t fnv1a(std::span<const double> xs, uint64_t h = 0xcbf29ce484222325ULL) {
    return fnv1a(xs.data(), xs.size() * sizeof(double), h);
}

}  // namespace dexmoe
