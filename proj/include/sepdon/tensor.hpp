#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace sepdon {

// Dense row-major 64-bit float tensor. Immutable by convention once built;
// all contraction kernels use fixed summation orders (ascending index,
// left-to-right products) so results are reproducible across runs and
// independent of the thread count.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape);
    Tensor(std::vector<std::size_t> shape, std::vector<double> data);
    Tensor(std::initializer_list<std::size_t> shape) : Tensor(std::vector<std::size_t>(shape)) {}

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<std::size_t> shape, double value);
    static Tensor from_vector(std::vector<double> values); // 1-D

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_[axis]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }

    double& operator[](std::size_t flat) { return data_[flat]; }
    double operator[](std::size_t flat) const { return data_[flat]; }

    double& at(std::span<const std::size_t> idx);
    double at(std::span<const std::size_t> idx) const;
    double& at2(std::size_t i, std::size_t j);
    double at2(std::size_t i, std::size_t j) const;

    std::string shape_str() const;

    // Reinterpret with a new shape of identical element count.
    Tensor reshaped(std::vector<std::size_t> shape) const;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

std::size_t shape_numel(std::span<const std::size_t> shape);

// Rows enumerate the Cartesian product of the axes in row-major order
// (last axis fastest). Result has shape [prod(n_j), d].
Tensor meshgrid_points(std::span<const Tensor> axes);

// Rank-r recombination of d per-axis feature blocks, each of shape [n_j,p,r]:
//   out[i_1,..,i_d,k] = sum_i prod_j parts[j][i_j,k,i]
// with ascending-i summation and left-to-right products.
Tensor outer_combine(std::span<const Tensor> parts);

// out[s, idx] = bias + sum_k branch[s,k] * trunk[idx,k], ascending k.
// branch is [N,p]; trunk is [n_1,..,n_d,p]; out is [N,n_1,..,n_d].
Tensor branch_trunk_contract(const Tensor& branch, const Tensor& trunk, double bias);

} // namespace sepdon
