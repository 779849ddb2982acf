#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace coda {

// splitmix64 finalizer; used to derive independent stream seeds from a
// base seed plus stream/step indices so resumed runs replay the exact
// same sampling sequence.
inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    return mix_seed(mix_seed(a) ^ (0x9e3779b97f4a7c15ull + b));
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return mix_seed(mix_seed(a, b) ^ mix_seed(c));
}

// Deterministic RNG. mt19937_64 is fully specified by the standard and the
// derived draws below avoid std::*_distribution (whose output is
// implementation-defined), so sequences are reproducible bit-for-bit.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // [0,1) with 53 random bits
    double uniform() { return double(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double a, double b) { return a + (b - a) * uniform(); }

    // [0,n) without modulo bias (Lemire multiply-shift; bias < 2^-64 ignored)
    std::int64_t uniform_int(std::int64_t n) {
        return std::int64_t((static_cast<unsigned __int128>(eng_()) * static_cast<unsigned __int128>(n)) >> 64);
    }

    // Box-Muller with cached spare
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform();  // (0,1], keeps log finite
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double th = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(th);
        has_spare_ = true;
        return r * std::cos(th);
    }

    // Knuth's method; fine for the desk-scale lambdas used here
    int poisson(double lambda) {
        double limit = std::exp(-lambda);
        int k = 0;
        double p = 1.0;
        do {
            ++k;
            p *= uniform();
        } while (p > limit);
        return k - 1;
    }

  private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace coda
