#pragma once

// Deterministic random streams.
//
// Generator: xoshiro256** (Blackman & Vigna), state seeded through SplitMix64.
// Both are fully specified integer algorithms, so the raw 64-bit stream is
// identical on every platform. Derived variates:
//   uniform  = (x >> 11) * 2^-53                     in [0, 1)
//   normal   = Box-Muller on (1 - uniform, uniform), both outputs used in order
//   index(n) = rejection sampling on the raw stream   (no modulo bias)
// The standard library distributions are not used because their output is
// implementation-defined.
//
// Streams are keyed: `Rng::keyed(seed, "dare", expert, "w1")` yields a stream
// that depends only on its key, so adding an expert or a tensor never shifts
// another stream.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

#include "consolidate/tensor.hpp"

namespace consolidate {

constexpr std::uint64_t splitmix64(std::uint64_t& state) noexcept {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// FNV-1a, 64-bit.
constexpr std::uint64_t fnv1a(std::string_view text) noexcept {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) noexcept {
        std::uint64_t sm = seed;
        for (auto& s : state_) s = splitmix64(sm);
    }

    /// Stream keyed by (seed, domain, index, name).
    static Rng keyed(std::uint64_t seed, std::string_view domain, std::uint64_t index = 0,
                     std::string_view name = {}) noexcept {
        std::uint64_t mix = seed;
        std::uint64_t k = splitmix64(mix);
        k ^= fnv1a(domain);
        std::uint64_t m2 = k;
        k = splitmix64(m2) ^ (index * 0xD1342543DE82EF95ULL);
        std::uint64_t m3 = k;
        k = splitmix64(m3) ^ fnv1a(name);
        return Rng(k);
    }

    std::uint64_t next() noexcept {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double normal() noexcept {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    /// Uniform integer in [0, n).
    std::uint64_t index(std::uint64_t n) noexcept {
        if (n <= 1) return 0;
        const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % n);
        std::uint64_t x;
        do {
            x = next();
        } while (x >= limit);
        return x % n;
    }

    template <typename T>
    void shuffle(std::vector<T>& items) noexcept {
        for (std::size_t i = items.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(index(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    static constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept {
        return (x << k) | (x >> (64 - k));
    }

    std::array<std::uint64_t, 4> state_{};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// Standard-normal tensor; identical (seed, shape) gives identical bytes.
inline Tensor gaussian(std::uint64_t seed, const Shape& shape) {
    Tensor t(shape);
    Rng rng(seed);
    for (auto& v : t.data()) v = static_cast<float>(rng.normal());
    return t;
}

inline Matrix gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
    Matrix m(rows, cols);
    for (auto& v : m.values) v = scale * rng.normal();
    return m;
}

/// `count` uniforms from the stream keyed by (seed, domain, expert, tensor name).
inline std::vector<double> keyed_uniforms(std::uint64_t seed, std::string_view domain,
                                          std::uint64_t expert, std::string_view name,
                                          std::size_t count) {
    Rng rng = Rng::keyed(seed, domain, expert, name);
    std::vector<double> u(count);
    for (auto& v : u) v = rng.uniform();
    return u;
}

}  // namespace consolidate
