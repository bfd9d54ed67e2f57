#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace phenokit {

// Deterministic random stream. std::mt19937_64 is fully specified by the
// standard, and the distributions here are hand-rolled on top of the raw
// stream, so identical seeds give identical values on every platform.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Lemire-style multiply-shift; bias is < 2^-64.
    std::int64_t uniform_int(std::int64_t n) {
        return static_cast<std::int64_t>(
            (static_cast<unsigned __int128>(next_u64()) * static_cast<std::uint64_t>(n)) >> 64);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller without caching; consumes two draws per call.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    double normal(double mean, double sigma) { return mean + sigma * normal(); }

    // Independent substream keyed by (seed, stream). Used for per-step and
    // per-worker randomness that must not depend on consumption order.
    static Rng derive(std::uint64_t seed, std::uint64_t stream) {
        std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return Rng(z ^ (z >> 31));
    }

  private:
    std::mt19937_64 gen_;
};

}  // namespace phenokit
