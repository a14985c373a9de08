#pragma once

#include <cstddef>
#include <vector>

#include "sepdon/parallel.hpp"

namespace sepdon::detail {

// y[r,:] = (or +=) sum_k x[r,k] * wt[k,:], k ascending; wt is the [in,out]
// transpose of W. Fixed per-element accumulation order, one writer per row;
// overwrite mode writes the k=0 term directly so y may start uninitialized.
inline void matmul_ikj(double* y, const double* x, const double* wt, std::size_t rows,
                       std::size_t in_dim, std::size_t out_dim, bool overwrite = false) {
    parallel_for(rows, rows * in_dim * out_dim, [&](std::size_t rr) {
        double* __restrict yr = y + rr * out_dim;
        const double* xr = x + rr * in_dim;
        for (std::size_t k = 0; k < in_dim; ++k) {
            const double a = xr[k];
            const double* __restrict w = wt + k * out_dim;
            if (k == 0 && overwrite) {
                for (std::size_t j = 0; j < out_dim; ++j) yr[j] = a * w[j];
            } else {
                for (std::size_t j = 0; j < out_dim; ++j) yr[j] += a * w[j];
            }
        }
    });
}

// acc[o,:] += sum_r g[r,o] * x[r,:]
inline void acc_outer_t(double* acc, const double* g, const double* x, std::size_t rows,
                        std::size_t out_dim, std::size_t in_dim) {
    parallel_for(out_dim, rows * in_dim * out_dim, [&](std::size_t o) {
        double* __restrict row = acc + o * in_dim;
        for (std::size_t rr = 0; rr < rows; ++rr) {
            const double a = g[rr * out_dim + o];
            const double* xr = x + rr * in_dim;
            for (std::size_t j = 0; j < in_dim; ++j) row[j] += a * xr[j];
        }
    });
}

inline std::vector<double> transpose(const double* m, std::size_t rows, std::size_t cols) {
    std::vector<double> t(rows * cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = m[i * cols + j];
    return t;
}

} // namespace sepdon::detail
