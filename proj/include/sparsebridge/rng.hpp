#pragma once
// Seeded randomness. Every stochastic entry point takes an Rng so runs are
// bit-reproducible for a fixed seed within one build.

#include <algorithm>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace sparsebridge {

class Rng {
  public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }
    // Uniform integer in [lo, hi].
    long integer(long lo, long hi) { return std::uniform_int_distribution<long>(lo, hi)(engine_); }
    std::uint64_t next_u64() { return engine_(); }

    void fill_normal(std::span<double> out) {
        for (auto &v : out) v = normal_(engine_);
    }

    template <class It> void shuffle(It first, It last) { std::shuffle(first, last, engine_); }

  private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

// SplitMix64 finalizer; used to derive independent child seeds
// (per subject, per reconstructed position, per training run).
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0) {
    std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

} // namespace sparsebridge
