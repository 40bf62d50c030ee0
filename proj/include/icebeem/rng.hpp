#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>

#include "icebeem/matrix.hpp"

namespace icebeem {

/// Deterministic counter-based generator: output i is the SplitMix64
/// finalizer applied to seed + i * 0x9E3779B97F4A7C15 (Steele et al. 2014).
/// The integer stream depends only on (seed, counter), so identical seeds
/// give identical streams on every platform. Children for parallel or
/// hierarchical use are derived with split(), which decorrelates by hashing
/// the parent seed together with the child index.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), counter_(0) {}

    std::uint64_t next_u64() {
        std::uint64_t z = seed_ + (++counter_) * 0x9E3779B97F4A7C15ULL;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform on [0,1) with 53 random bits.
    double uniform01() { return (next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("Rng::below: n == 0");
        // rejection keeps the draw unbiased
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return v % n;
    }

    /// Standard normal via the Marsaglia polar method; pairs are cached.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform01() - 1.0;
            v = 2.0 * uniform01() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double factor = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * factor;
        have_spare_ = true;
        return u * factor;
    }

    Vector normal_vector(std::size_t n) {
        Vector out(n);
        for (double& x : out) x = normal();
        return out;
    }

    /// Child generator with an independent stream; the parent stream is
    /// unaffected.
    Rng split(std::uint64_t child_index) const {
        std::uint64_t z = seed_ ^ (0xD1B54A32D192ED03ULL + child_index * 0x8CB92BA72F3D8DD7ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return Rng(z ^ (z >> 31));
    }

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::uint64_t counter_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

/// n i.i.d. rows mean + L*eps with eps standard normal; L lower-triangular.
inline Matrix gaussian_sample(const Vector& mean, const Matrix& chol_lower, std::size_t n,
                              Rng& rng) {
    const std::size_t d = mean.size();
    if (chol_lower.rows() != d || chol_lower.cols() != d)
        throw std::invalid_argument("gaussian_sample: factor dims do not match mean");
    Matrix out(n, d);
    Vector eps(d);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < d; ++k) eps[k] = rng.normal();
        for (std::size_t r = 0; r < d; ++r) {
            double acc = mean[r];
            const double* lrow = chol_lower.row_ptr(r);
            for (std::size_t c = 0; c <= r; ++c) acc += lrow[c] * eps[c];
            out(i, r) = acc;
        }
    }
    return out;
}

}  // namespace icebeem
