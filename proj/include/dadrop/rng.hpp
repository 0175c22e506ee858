#pragma once

#include <cstdint>
#include <initializer_list>
#include <cmath>
#include <random>

namespace dadrop {

using Rng = std::mt19937_64;

// Stateless 64-bit mixer used to derive independent stream seeds.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Seed for a named purpose, e.g. derive_seed(seed, {kStreamWrs, step, sample_id}).
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> parts) {
    std::uint64_t h = splitmix64(base);
    for (auto p : parts) h = splitmix64(h ^ splitmix64(p + 0x632be59bd9b4e019ULL));
    return h;
}

// Uniform draw strictly inside (0, 1); one engine call per draw.
inline double uniform_open(Rng& rng) {
    return (static_cast<double>(rng() >> 11) + 0.5) * (1.0 / 9007199254740992.0);
}

inline double normal(Rng& rng, double mean = 0.0, double stddev = 1.0) {
    // Box-Muller on two open-interval draws.
    const double u1 = uniform_open(rng);
    const double u2 = uniform_open(rng);
    return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

// Integer in [0, n).
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
    return static_cast<std::uint64_t>(uniform_open(rng) * static_cast<double>(n));
}

enum Stream : std::uint64_t {
    kStreamInit = 1,
    kStreamBlocks = 2,
    kStreamWrs = 3,
    kStreamDataOrder = 4,
    kStreamLabels = 5,
    kStreamRender = 6,
    kStreamProbe = 7,
    kStreamSplit = 8,
};

}  // namespace dadrop
