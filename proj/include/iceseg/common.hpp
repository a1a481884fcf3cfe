#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace iceseg {

inline constexpr std::uint8_t kIgnoreLabel = 255;

// 4-D tensor extent, (batch, channel, height, width).
struct Shape4 {
    int n = 0, c = 0, h = 0, w = 0;

    std::int64_t numel() const {
        return static_cast<std::int64_t>(n) * c * h * w;
    }
    bool operator==(const Shape4&) const = default;

    std::string str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
               std::to_string(h) + "," + std::to_string(w) + ")";
    }
};

[[noreturn]] inline void fail(const std::string& msg) {
    throw std::runtime_error(msg);
}

inline void require(bool ok, const std::string& msg) {
    if (!ok) fail(msg);
}

// ---- seeded RNG helpers ----------------------------------------------------
// All stochastic components derive their streams from 64-bit seeds through
// splitmix64 so that runs are reproducible regardless of call interleaving.

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    return splitmix64(a ^ splitmix64(b));
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return splitmix64(mix_seed(a, b) ^ splitmix64(c));
}

inline std::uint64_t hash_str(const std::string& s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;  // FNV-1a
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001B3ULL;
    }
    return h;
}

// Uniform in [0,1).
inline double uniform01(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Standard normal via Box-Muller; pinned here so that model initialization
// is bit-reproducible across standard-library versions.
class NormalSampler {
public:
    explicit NormalSampler(std::uint64_t seed) : rng_(seed) {}

    double next() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform01(rng_);
        } while (u1 <= 0.0);
        const double u2 = uniform01(rng_);
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

private:
    std::mt19937_64 rng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace iceseg
