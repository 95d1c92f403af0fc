#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace invlab {

// Deterministic seeded RNG with support for derived independent streams.
//
// All randomness in the library flows through this type so that results are
// reproducible from a single root seed regardless of evaluation order or
// parallelism: concurrent lanes never share a generator, they each own a
// fork() derived from the parent seed and a stream id.
class SplitRng {
public:
    explicit SplitRng(std::uint64_t seed = 0) : seed_(seed), gen_(mix(seed)) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1) with 53 bits of precision.
    double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double a, double b) { return a + uniform01() * (b - a); }

    // Unbiased integer in [0, n) via 128-bit multiply-shift.
    std::size_t below(std::size_t n) {
        return static_cast<std::size_t>(
            (static_cast<unsigned __int128>(gen_()) * n) >> 64);
    }

    // Standard normal via Box-Muller. Two uniforms per draw, no spare cached,
    // so the stream position is a pure function of the number of calls.
    double normal() {
        double u1 = uniform01();
        double u2 = uniform01();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Derived stream: deterministic function of (seed, stream id), independent
    // of this generator's current position.
    SplitRng fork(std::uint64_t stream) const {
        return SplitRng(mix(seed_ ^ (0x9e3779b97f4a7c15ULL + stream * 0xbf58476d1ce4e5b9ULL)));
    }

    std::uint64_t seed() const { return seed_; }

    // In-place Fisher-Yates shuffle.
    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = below(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    // splitmix64 finalizer; decorrelates nearby seeds before feeding mt19937_64.
    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t seed_;
    std::mt19937_64 gen_;
};

} // namespace invlab
