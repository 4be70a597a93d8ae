#pragma once

#include <cstdint>
#include <string>

#include "stg/common.hpp"

namespace stg {

// SplitMix64. Small, fast, and exactly reproducible on any platform, which the
// determinism contracts here need more than statistical heft.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 bits of precision.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Uniform integer in [0, n). Rejection-free modulo is fine at our scales,
    // but use Lemire-style rejection to keep draws exactly uniform.
    std::uint64_t next_below(std::uint64_t n) {
        if (n == 0) return 0;
        std::uint64_t threshold = (0 - n) % n;
        for (;;) {
            std::uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    std::uint64_t state() const { return state_; }

  private:
    std::uint64_t state_;
};

// Derives an independent stream for a named component. Streams for different
// (name, index) pairs are decorrelated by hashing; the same triple always
// yields the same stream.
inline Rng derive_stream(std::uint64_t seed, const std::string& name, std::uint64_t index = 0) {
    std::uint64_t h = fnv1a64(name);
    h = fnv1a64(&seed, sizeof(seed), h);
    h = fnv1a64(&index, sizeof(index), h);
    return Rng(h);
}

}  // namespace stg
