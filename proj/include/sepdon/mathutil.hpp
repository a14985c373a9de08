#pragma once

#include <cmath>
#include <cstdint>
#include <cstddef>
#include <numbers>

namespace sepdon {

// sin(pi*z) and cos(pi*z) with exact argument reduction, so that integer z
// gives exactly 0 / +-1. Series oracles rely on boundary terms vanishing.
inline double sin_pi(double z) {
    double n = std::round(z);
    double r = z - n;
    double s = std::sin(std::numbers::pi * r);
    bool odd = std::fmod(std::fabs(n), 2.0) == 1.0;
    return odd ? -s : s;
}

inline double cos_pi(double z) {
    double n = std::round(z);
    double r = z - n;
    double c = std::cos(std::numbers::pi * r);
    bool odd = std::fmod(std::fabs(n), 2.0) == 1.0;
    return odd ? -c : c;
}

// FNV-1a 64-bit, used as the blob checksum in dataset/checkpoint manifests.
inline std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ull) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

// Least-squares slope of y against x. Used for growth-exponent fits on
// log(ms) vs log(n) in the benchmark harness.
inline double ls_slope(const double* x, const double* y, std::size_t n) {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        sxy += x[i] * y[i];
    }
    double d = n * sxx - sx * sx;
    return (n * sxy - sx * sy) / d;
}

} // namespace sepdon
