#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>

namespace dexmoe {

namespace detail {
inline uint64_t splitmix64(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}
}  // namespace detail

// xoshiro256++ with splitmix64 seeding. The whole project draws randomness
// through this type so that runs are reproducible across platforms and the
// generator state (four words) serializes into checkpoints.
class Rng {
  public:
    Rng() { reseed(0x853c49e6748fea9bULL); }
    explicit Rng(uint64_t seed) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t x = seed;
        for (auto& w : s_)
            w = detail::splitmix64(x);
    }

    // Independent stream keyed by (seed, path...). Streams with distinct
    // paths never share draws, which is what makes per-env / per-object
    // parallelism order-independent.
    static Rng stream(uint64_t seed, std::initializer_list<uint64_t> path) {
        uint64_t x = seed;
        for (uint64_t p : path) {
            uint64_t t = p;
            x ^= detail::splitmix64(t) + 0x9e3779b97f4a7c15ULL + (x << 6) + (x >> 2);
        }
        Rng r;
        r.reseed(x);
        return r;
    }

    uint64_t next() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // [0, 1)
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // (0, 1]
    double uniform_pos() { return static_cast<double>((next() >> 11) + 1) * 0x1.0p-53; }

    // Box-Muller; consumes exactly two draws per call.
    double normal() {
        const double u1 = uniform_pos();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    // Unbiased-enough bounded integer (Lemire multiply-shift).
    uint64_t uniform_int(uint64_t n) {
        return static_cast<uint64_t>((static_cast<__uint128_t>(next()) * n) >> 64);
    }

    std::array<uint64_t, 4> state() const { return s_; }
    void set_state(const std::array<uint64_t, 4>& s) { s_ = s; }

  private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    std::array<uint64_t, 4> s_{};
};

// Stream purpose tags, so call sites never collide by accident.
namespace stream_tag {
inline constexpr uint64_t objects = 1;
inline constexpr uint64_t init = 2;
inline constexpr uint64_t env = 3;
inline constexpr uint64_t train = 4;
inline constexpr uint64_t eval = 5;
}  // namespace stream_tag

}  // namespace dexmoe
