#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

namespace pbsn {

/// Seeded generator with portable uniform draws (the std distributions are
/// implementation-defined, which would break cross-platform reproducibility).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Independent stream for (seed, index), e.g. one per sample.
    static Rng derive(std::uint64_t seed, std::uint64_t index) {
        return Rng(mix(seed ^ mix(index + 0x9e3779b97f4a7c15ULL)));
    }

    std::uint64_t bits() { return engine_(); }
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Integer in [0, n).
    std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
    }

private:
    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::mt19937_64 engine_;
};

}  // namespace pbsn
