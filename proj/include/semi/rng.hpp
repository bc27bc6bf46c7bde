#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace semi {

// splitmix64 step, used to derive independent seeds from a base seed.
inline std::uint64_t split_mix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    return split_mix(a ^ split_mix(b));
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return mix_seed(mix_seed(a, b), c);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c, std::uint64_t d) {
    return mix_seed(mix_seed(a, b, c), d);
}

// Deterministic RNG. mt19937_64 output is pinned by the standard; the
// uniform/gaussian transforms below avoid the implementation-defined
// std::*_distribution adaptors so streams are bit-identical across platforms.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // [0, 1)
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    // (0, 1]
    double uniform_open() {
        return static_cast<double>((gen_() >> 11) + 1) * 0x1.0p-53;
    }

    // [0, n)
    int uniform_int(int n) {
        return static_cast<int>(uniform() * static_cast<double>(n)) % n;
    }

    // standard normal, Box-Muller
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = uniform_open();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(t);
        have_spare_ = true;
        return r * std::cos(t);
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace semi
