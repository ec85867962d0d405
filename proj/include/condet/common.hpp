// Shared aliases, deterministic RNG and small utilities.
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace condet {

// n x 4 row-major box matrix; one row per box, signal or normalized space.
using BoxArray = Eigen::Matrix<double, Eigen::Dynamic, 4, Eigen::RowMajor>;

inline constexpr uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Deterministic RNG. std::mt19937_64 is fully specified by the standard;
// the distributions below are hand-rolled because the std:: ones are not,
// so streams are reproducible across standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi], inclusive, without modulo bias.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        if (lo > hi) throw std::invalid_argument("uniform_int: empty range");
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        if (span == 0) return static_cast<int64_t>(next_u64());  // full 64-bit range
        uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return lo + static_cast<int64_t>(v % span);
    }

    // Standard normal via Marsaglia's polar method (no libm trig).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        double m = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * m;
        has_spare_ = true;
        return u * m;
    }

    // Independent child stream keyed by `tag`; the parent state is unchanged.
    Rng fork(uint64_t tag) const { return Rng(splitmix64(state_ ^ splitmix64(tag))); }

private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

inline BoxArray gaussian_boxes(int n, Rng& rng, double scale = 1.0) {
    BoxArray out(n, 4);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < 4; ++j) out(i, j) = rng.normal() * scale;
    return out;
}

}  // namespace condet
