#pragma once

// Deterministic random number generation. All draws are hand-derived from
// std::mt19937_64 outputs so results are bit-identical across platforms
// (the standard pins the engine but not the distributions).

#include <cstdint>
#include <cmath>
#include <initializer_list>
#include <random>
#include <vector>

namespace muka {

// SplitMix64 finalizer; used to derive stream keys from seed tuples.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

// Splittable key derivation: fold each tuple element through the mixer.
// derive_key(base, a, b, ...) gives independent streams for distinct tuples.
inline std::uint64_t derive_key(std::initializer_list<std::uint64_t> parts) {
    std::uint64_t k = 0x243F6A8885A308D3ULL;  // arbitrary nonzero start
    for (std::uint64_t p : parts) k = mix64(k ^ mix64(p));
    return k;
}

inline std::uint64_t derive_key(std::uint64_t a, std::uint64_t b) {
    return derive_key({a, b});
}
inline std::uint64_t derive_key(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return derive_key({a, b, c});
}
inline std::uint64_t derive_key(std::uint64_t a, std::uint64_t b, std::uint64_t c,
                                std::uint64_t d) {
    return derive_key({a, b, c, d});
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller. Two uniforms per draw, no cached spare,
    // so the stream position is a pure function of the call count.
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    // Unbiased integer in [0, n) by rejection.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) return 0;
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n + 1) % n;
        std::uint64_t x;
        do {
            x = gen_();
        } while (x > limit);
        return x % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Fisher-Yates, draws from below() so the permutation is reproducible.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
};

}  // namespace muka
