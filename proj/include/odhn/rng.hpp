#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "odhn/error.hpp"

namespace odhn {

// Seeded RNG with hand-rolled distribution transforms. std::mt19937_64 has a
// standardized output sequence, but the std <random> distributions do not, so
// every transform that must reproduce bit-identical artifacts lives here.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Unbiased integer in [0, n) via rejection.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw DomainError("Rng::below: n must be positive");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller, spare value cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Truncated normal: redraw until within [lo, hi] sigmas of the mean.
    double trunc_normal(double mean, double stddev, double lo_sigma = -2.0, double hi_sigma = 2.0) {
        double z;
        do {
            z = normal();
        } while (z < lo_sigma || z > hi_sigma);
        return mean + stddev * z;
    }

    // Knuth multiplication method below lambda=30, normal approximation above.
    std::uint64_t poisson(double lambda) {
        if (lambda < 0.0) throw DomainError("Rng::poisson: lambda must be nonnegative");
        if (lambda == 0.0) return 0;
        if (lambda < 30.0) {
            const double threshold = std::exp(-lambda);
            std::uint64_t k = 0;
            double p = 1.0;
            do {
                ++k;
                p *= uniform();
            } while (p > threshold);
            return k - 1;
        }
        const double x = std::round(normal(lambda, std::sqrt(lambda)));
        return x < 0.0 ? 0 : static_cast<std::uint64_t>(x);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

    // k distinct indices from [0, n), order of selection kept.
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
        if (k > n) throw DomainError("Rng::sample_without_replacement: k > n");
        std::vector<std::size_t> pool(n);
        for (std::size_t i = 0; i < n; ++i) pool[i] = i;
        std::vector<std::size_t> out;
        out.reserve(k);
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(below(n - i));
            std::swap(pool[i], pool[j]);
            out.push_back(pool[i]);
        }
        return out;
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace odhn
