#ifndef SSRB_CORE_RNG_HPP
#define SSRB_CORE_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

#include "ssrb/core/errors.hpp"
#include "ssrb/core/tensor.hpp"

namespace ssrb::rng {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Labeled seed splitting: one run seed fans out into independent substreams,
// so subsystem randomness is reproducible and order-insensitive.
inline uint64_t derive_seed(uint64_t root, std::string_view label, uint64_t a = 0, uint64_t b = 0) {
    uint64_t x = splitmix64(root ^ 0x5353524200000001ULL);
    x = splitmix64(x ^ fnv1a64(label));
    x = splitmix64(x ^ a);
    x = splitmix64(x ^ b);
    return x;
}

// Deterministic random stream. mt19937_64 output is fixed by the standard;
// uniform/normal/poisson are implemented here rather than with std::
// distributions so sequences do not depend on the standard library build.
struct Stream {
    std::mt19937_64 gen;
    bool has_spare     = false;
    double spare       = 0.0;

    explicit Stream(uint64_t seed) : gen(seed) {}

    uint64_t u64() { return gen(); }

    // [0, 1)
    double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    float uniformf(float lo = 0.0f, float hi = 1.0f) { return static_cast<float>(uniform(lo, hi)); }

    double log_uniform(double lo, double hi) {
        return std::exp(uniform(std::log(lo), std::log(hi)));
    }

    // Inclusive range via 64-bit modulo; bias is ~n/2^64, irrelevant here.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        if (hi < lo) throw PreconditionError("uniform_int: empty range");
        uint64_t n = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(u64() % n);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller with a cached spare.
    double normal() {
        if (has_spare) {
            has_spare = false;
            return spare;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2    = uniform();
        double r     = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare        = r * std::sin(theta);
        has_spare    = true;
        return r * std::cos(theta);
    }

    float normalf() { return static_cast<float>(normal()); }

    void fill_normal(Tensor& t, float scale = 1.0f) {
        for (auto& v : t.data) v = scale * normalf();
    }

    Tensor normal_tensor(int n, int c, int h, int w, float scale = 1.0f) {
        Tensor t(n, c, h, w);
        fill_normal(t, scale);
        return t;
    }

    // Exact Poisson: CDF inversion for small mean, Hormann's PTRS transformed
    // rejection for large mean (the numpy approach).
    int64_t poisson(double lambda) {
        if (lambda < 0.0 || !std::isfinite(lambda))
            throw PreconditionError("poisson: invalid mean");
        if (lambda == 0.0) return 0;
        if (lambda < 10.0) return poisson_inversion(lambda);
        return poisson_ptrs(lambda);
    }

   private:
    int64_t poisson_inversion(double lambda) {
        double p = std::exp(-lambda);
        double f = p;
        double u = uniform();
        int64_t k = 0;
        while (u > f && k < 2000) {
            k++;
            p *= lambda / static_cast<double>(k);
            f += p;
        }
        return k;
    }

    int64_t poisson_ptrs(double lambda) {
        double slam    = std::sqrt(lambda);
        double loglam  = std::log(lambda);
        double b       = 0.931 + 2.53 * slam;
        double a       = -0.059 + 0.02483 * b;
        double invalpha = 1.1239 + 1.1328 / (b - 3.4);
        double vr      = 0.9277 - 3.6224 / (b - 2.0);
        while (true) {
            double u  = uniform() - 0.5;
            double v  = uniform();
            double us = 0.5 - std::fabs(u);
            double kd = std::floor((2.0 * a / us + b) * u + lambda + 0.43);
            if (us >= 0.07 && v <= vr) return static_cast<int64_t>(kd);
            if (kd < 0.0 || (us < 0.013 && v > us)) continue;
            double k = kd;
            if (std::log(v) + std::log(invalpha) - std::log(a / (us * us) + b) <=
                k * loglam - lambda - std::lgamma(k + 1.0)) {
                return static_cast<int64_t>(kd);
            }
        }
    }
};

inline Stream derive_stream(uint64_t root, std::string_view label, uint64_t a = 0, uint64_t b = 0) {
    return Stream(derive_seed(root, label, a, b));
}

}  // namespace ssrb::rng

#endif
