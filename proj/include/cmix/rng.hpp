#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace cmix {

// Seeded RNG used everywhere randomness is needed. Wraps std::mt19937_64 but
// pins all value transforms (uniform, normal, gamma) so draws depend only on
// the seed and call sequence, not on library-specific distribution code.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    float uniform_float() { return static_cast<float>(uniform()); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n) via 128-bit multiply (no modulo bias to speak of
    // at these ranges).
    std::int64_t uniform_int(std::int64_t n) {
        return static_cast<std::int64_t>(
            (static_cast<unsigned __int128>(next_u64()) * static_cast<unsigned __int128>(n)) >> 64);
    }

    bool coin(double p = 0.5) { return uniform() < p; }

    // Standard normal, Box-Muller with a cached spare.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do { u1 = uniform(); } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    // Marsaglia-Tsang gamma sampler, shape a > 0, unit scale.
    double gamma(double a) {
        if (a < 1.0) {
            double u = 0.0;
            do { u = uniform(); } while (u <= 0.0);
            return gamma(a + 1.0) * std::pow(u, 1.0 / a);
        }
        const double d = a - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = 0.0, v = 0.0;
            do {
                x = normal();
                v = 1.0 + c * x;
            } while (v <= 0.0);
            v = v * v * v;
            const double u = uniform();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    double beta(double a, double b) {
        const double x = gamma(a);
        const double y = gamma(b);
        return x / (x + y);
    }

    // Stateless seed derivation (splitmix64 over the packed inputs), used to
    // give every (epoch, sample) pair its own stream.
    static std::uint64_t derive(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
        auto mix = [](std::uint64_t z) {
            z += 0x9e3779b97f4a7c15ULL;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
            return z ^ (z >> 31);
        };
        return mix(mix(mix(base) ^ a) ^ b);
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace cmix
