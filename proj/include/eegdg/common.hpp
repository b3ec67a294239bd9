#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace eegdg {

// All randomness in the project flows through mt19937_64 plus the helpers
// below. The standard distributions are implementation-defined, so we draw
// bits ourselves to keep seeded results stable across toolchains.
using Rng = std::mt19937_64;

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t mix64(std::uint64_t x) {
    // splitmix64 finalizer
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Independent named stream: same base seed + same tag -> same stream.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
    return mix64(base ^ fnv1a64(tag));
}

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag,
                                 std::uint64_t a) {
    return mix64(derive_seed(base, tag) ^ mix64(a));
}

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag,
                                 std::uint64_t a, std::uint64_t b) {
    return mix64(derive_seed(base, tag, a) ^ mix64(b * 0x9e3779b97f4a7c15ull + 1));
}

// Uniform in [0, 1), 53-bit resolution.
inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform_in(Rng& rng, double lo, double hi) {
    return lo + (hi - lo) * uniform01(rng);
}

inline double log_uniform_in(Rng& rng, double lo, double hi) {
    return std::exp(uniform_in(rng, std::log(lo), std::log(hi)));
}

// Unbiased-enough bounded draw (128-bit multiply).
inline std::size_t rand_index(Rng& rng, std::size_t n) {
    return static_cast<std::size_t>(
        (static_cast<unsigned __int128>(rng()) * n) >> 64);
}

template <typename T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::size_t j = rand_index(rng, i);
        std::swap(v[i - 1], v[j]);
    }
}

// Box-Muller with a cached spare.
class Gaussian {
public:
    double operator()(Rng& rng) {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform01(rng);  // (0, 1]
        double u2 = uniform01(rng);
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

private:
    double spare_ = 0.0;
    bool has_spare_ = false;
};

inline double gaussian(Rng& rng) {
    Gaussian g;
    return g(rng);
}

// Marsaglia-Tsang gamma sampler, boosted for shape < 1.
inline double sample_gamma(Rng& rng, double shape) {
    if (!(shape > 0.0)) {
        throw std::invalid_argument("sample_gamma: shape must be > 0, got " +
                                    std::to_string(shape));
    }
    if (shape < 1.0) {
        double u = uniform01(rng);
        while (u <= 0.0) u = uniform01(rng);
        return sample_gamma(rng, shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    Gaussian gauss;
    for (;;) {
        double x = gauss(rng);
        double v = 1.0 + c * x;
        if (v <= 0.0) continue;
        v = v * v * v;
        double u = uniform01(rng);
        if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
        if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v)))
            return d * v;
    }
}

inline double sample_beta(Rng& rng, double a, double b) {
    double x = sample_gamma(rng, a);
    double y = sample_gamma(rng, b);
    double s = x + y;
    if (s <= 0.0) return 0.5;  // both underflowed; vanishing probability
    return x / s;
}

}  // namespace eegdg
