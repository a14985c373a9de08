#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "sepdon/rng.hpp"
#include "sepdon/tensor.hpp"

namespace testsupport {

inline sepdon::Tensor random_tensor(std::vector<std::size_t> shape, sepdon::Rng& rng,
                                    double lo = -1.0, double hi = 1.0) {
    sepdon::Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.next_uniform(lo, hi);
    return t;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

// Component check against a finite-difference reference: relative tolerance
// with an absolute floor where the reference itself sits in FD noise.
inline bool close_to_fd(double ad, double fd, double rtol = 1e-6, double atol = 1e-9) {
    return std::fabs(ad - fd) <= std::max(atol, rtol * std::max(std::fabs(ad), std::fabs(fd)));
}

} // namespace testsupport
