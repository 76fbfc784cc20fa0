#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace ttrx {

/// SplitMix64 finalizer; used to derive independent seeds from a base seed.
constexpr std::uint64_t mix_seed(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> salts) noexcept {
    std::uint64_t s = mix_seed(base);
    for (auto v : salts) s = mix_seed(s ^ mix_seed(v));
    return s;
}

/// Seeded random stream. The engine is mt19937_64; the real-valued
/// transforms are spelled out here instead of using <random> distributions
/// so that streams are identical across standard library implementations.
class RngState {
public:
    explicit RngState(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);

    /// Standard normal via Box-Muller; the spare deviate is cached.
    double normal();

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace ttrx
