#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "episeg/tensor.hpp"

namespace episeg::num {

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}
}  // namespace detail

/// Deterministic counter-based generator (splitmix64). Only fixed algorithms
/// are used on top of it (Box-Muller, Marsaglia-Tsang), never the
/// implementation-defined std:: distributions, so a seed fully determines the
/// sample sequence.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), state_(seed) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t draw_count() const { return draws_; }

    std::uint64_t next_u64() {
        ++draws_;
        return detail::splitmix64(state_);
    }

    /// Uniform in [0,1) with 53 random bits.
    real uniform() { return static_cast<real>(next_u64() >> 11) * 0x1.0p-53; }

    real uniform_nonzero() {
        real u = uniform();
        while (u <= 0.0) u = uniform();
        return u;
    }

    std::uint64_t uniform_index(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("uniform_index: n must be positive");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return x % n;
    }

    /// Standard normal via Box-Muller; consumes exactly two uniforms per call.
    real normal() {
        const real u1 = uniform_nonzero();
        const real u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    /// Gamma(shape, 1) by Marsaglia-Tsang squeeze, with the shape<1 boost
    /// (sample Gamma(shape+1) and scale by U^{1/shape}); valid deep into the
    /// shape<1 regime needed for Beta(0.1, 0.1).
    real gamma(real shape) {
        if (!(shape > 0.0)) throw std::invalid_argument("gamma: shape must be positive");
        if (shape < 1.0) {
            const real boost = std::pow(uniform_nonzero(), 1.0 / shape);
            return gamma(shape + 1.0) * boost;
        }
        const real d = shape - 1.0 / 3.0;
        const real c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            real x, v;
            do {
                x = normal();
                v = 1.0 + c * x;
            } while (v <= 0.0);
            v = v * v * v;
            const real u = uniform_nonzero();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    /// Beta(g, g) as x/(x+y) with two Gamma(g,1) draws.
    real beta_symmetric(real g) {
        if (!(g > 0.0)) throw std::invalid_argument("beta_symmetric: gamma must be positive");
        const real x = gamma(g);
        const real y = gamma(g);
        const real s = x + y;
        if (s <= 0.0) return 0.5;
        return x / s;
    }

    std::vector<real> normal_vector(int n) {
        std::vector<real> out(static_cast<std::size_t>(n));
        for (auto& v : out) v = normal();
        return out;
    }

    /// Independent stream derived from this generator's seed and a tag;
    /// forking does not consume draws from the parent.
    Rng fork(std::uint64_t tag) const {
        std::uint64_t s = seed_ ^ (0xA5A5A5A55A5A5A5AULL + tag);
        return Rng(detail::splitmix64(s));
    }

private:
    std::uint64_t seed_;
    std::uint64_t state_;
    std::uint64_t draws_ = 0;
};

}  // namespace episeg::num
