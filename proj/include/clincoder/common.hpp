#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace clincoder {

// Uniform helpers on top of mt19937_64 so generated artifacts are
// byte-identical across standard libraries (uniform_int_distribution is
// implementation-defined).
inline std::uint64_t rand_u64(std::mt19937_64& rng) { return rng(); }

inline std::size_t rand_index(std::mt19937_64& rng, std::size_t n) {
    if (n == 0) throw std::invalid_argument("rand_index: n == 0");
    // rejection sampling to avoid modulo bias
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do { x = rng(); } while (x >= limit);
    return static_cast<std::size_t>(x % n);
}

inline double rand_real(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline bool rand_bernoulli(std::mt19937_64& rng, double p) {
    return rand_real(rng) < p;
}

// uniform in [-r, r]
inline double rand_uniform_sym(std::mt19937_64& rng, double r) {
    return (2.0 * rand_real(rng) - 1.0) * r;
}

// FNV-1a, used for config hashes embedded in output files.
inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

} // namespace clincoder
