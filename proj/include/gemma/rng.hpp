// SPDX-License-Identifier: Apache-2.0
//
// Deterministic RNG used everywhere randomness is needed. We intentionally do
// not use <random> distributions: their sequences differ between standard
// library implementations, and runs must be bit-reproducible from a single
// seed on any platform.

#pragma once

#include <cmath>
#include <cstdint>

namespace gemma {

// splitmix64: tiny, well-mixed, jumpable by construction.
inline uint64_t splitmix64(uint64_t& state) {
    state += 0x9e3779b97f4a7c15ull;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Mixes independent stream identifiers (seed, step, slot, ...) into one key,
// so batch k of a run can be regenerated without replaying steps 0..k-1.
inline uint64_t mix_u64(uint64_t a, uint64_t b) {
    uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
    return splitmix64(s);
}

class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {
        // decorrelate small consecutive seeds
        (void)splitmix64(state_);
    }

    uint64_t next_u64() { return splitmix64(state_); }

    // [0, n)
    uint64_t next_below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    // [0, 1) with 53 random bits
    double next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Box-Muller, spare cached; deterministic sequence
    double next_normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - next_uniform();  // avoid log(0)
        double u2 = next_uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // Normal truncated at 2 sigma by resampling.
    double next_trunc_normal(double std_dev) {
        double z = next_normal();
        while (z < -2.0 || z > 2.0) {
            z = next_normal();
        }
        return z * std_dev;
    }

private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace gemma
