#include "sepdon/tensor.hpp"

#include <sstream>

#include "sepdon/errors.hpp"
#include "sepdon/parallel.hpp"

namespace sepdon {

std::size_t shape_numel(std::span<const std::size_t> shape) {
    std::size_t n = 1;
    for (std::size_t s : shape) n *= s;
    return n;
}

static void check_shape(const std::vector<std::size_t>& shape) {
    if (shape.empty()) throw shape_error("tensor shape must have at least one axis");
    for (std::size_t s : shape)
        if (s == 0) throw shape_error("tensor axis lengths must be >= 1");
}

Tensor::Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(shape_numel(shape_), 0.0);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (shape_numel(shape_) != data_.size())
        throw shape_error("tensor data length " + std::to_string(data_.size()) +
                          " does not match shape " + shape_str());
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
    Tensor t(std::move(shape));
    for (double& v : t.data_) v = value;
    return t;
}

Tensor Tensor::from_vector(std::vector<double> values) {
    std::vector<std::size_t> shape{values.size()};
    return Tensor(std::move(shape), std::move(values));
}

static std::size_t flat_index(const std::vector<std::size_t>& shape, std::span<const std::size_t> idx) {
    if (idx.size() != shape.size()) throw shape_error("index rank mismatch");
    std::size_t flat = 0;
    for (std::size_t a = 0; a < shape.size(); ++a) {
        if (idx[a] >= shape[a]) throw shape_error("index out of range");
        flat = flat * shape[a] + idx[a];
    }
    return flat;
}

double& Tensor::at(std::span<const std::size_t> idx) {
    return data_[flat_index(shape_, idx)];
}

double Tensor::at(std::span<const std::size_t> idx) const {
    return data_[flat_index(shape_, idx)];
}

double& Tensor::at2(std::size_t i, std::size_t j) {
    return data_[i * shape_[1] + j];
}

double Tensor::at2(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t a = 0; a < shape_.size(); ++a) os << (a ? "," : "") << shape_[a];
    os << "]";
    return os.str();
}

Tensor Tensor::reshaped(std::vector<std::size_t> shape) const {
    if (shape_numel(shape) != size())
        throw shape_error("reshape changes element count");
    return Tensor(std::move(shape), data_);
}

Tensor meshgrid_points(std::span<const Tensor> axes) {
    if (axes.empty()) throw std::invalid_argument("meshgrid_points: empty axis list");
    const std::size_t d = axes.size();
    std::size_t total = 1;
    for (const Tensor& ax : axes) {
        if (ax.rank() != 1 || ax.size() == 0)
            throw std::invalid_argument("meshgrid_points: each axis must be a nonempty vector");
        total *= ax.size();
    }
    Tensor out({total, d});
    std::vector<std::size_t> idx(d, 0);
    for (std::size_t row = 0; row < total; ++row) {
        for (std::size_t a = 0; a < d; ++a) out.at2(row, a) = axes[a][idx[a]];
        for (std::size_t a = d; a-- > 0;) { // last axis fastest
            if (++idx[a] < axes[a].size()) break;
            idx[a] = 0;
        }
    }
    return out;
}

Tensor outer_combine(std::span<const Tensor> parts) {
    if (parts.empty()) throw std::invalid_argument("outer_combine: empty parts list");
    const std::size_t d = parts.size();
    for (const Tensor& t : parts)
        if (t.rank() != 3)
            throw shape_error("outer_combine: each part must be [n_j,p,r], got " + t.shape_str());
    const std::size_t p = parts[0].dim(1);
    const std::size_t r = parts[0].dim(2);
    std::size_t lattice = 1;
    for (const Tensor& t : parts) {
        if (t.dim(1) != p || t.dim(2) != r)
            throw shape_error("outer_combine: parts disagree on (p,r): " + t.shape_str());
        lattice *= t.dim(0);
    }

    std::vector<std::size_t> out_shape;
    for (const Tensor& t : parts) out_shape.push_back(t.dim(0));
    out_shape.push_back(p);
    Tensor out(out_shape);

    // Rank terms accumulate in ascending order; the running product sweeps the
    // parts left to right, so every output element sees one fixed op order.
    std::vector<double> cur, next;
    for (std::size_t i = 0; i < r; ++i) {
        cur.assign(parts[0].dim(0) * p, 0.0);
        for (std::size_t a = 0; a < parts[0].dim(0); ++a)
            for (std::size_t k = 0; k < p; ++k)
                cur[a * p + k] = parts[0].data()[(a * p + k) * r + i];
        std::size_t rows = parts[0].dim(0);
        for (std::size_t j = 1; j < d; ++j) {
            const std::size_t nj = parts[j].dim(0);
            next.assign(rows * nj * p, 0.0);
            const double* pj = parts[j].data();
            parallel_for(rows, rows * nj * p, [&](std::size_t m) {
                for (std::size_t a = 0; a < nj; ++a)
                    for (std::size_t k = 0; k < p; ++k)
                        next[(m * nj + a) * p + k] = cur[m * p + k] * pj[(a * p + k) * r + i];
            });
            cur.swap(next);
            rows *= nj;
        }
        double* o = out.data();
        for (std::size_t e = 0; e < lattice * p; ++e) o[e] += cur[e];
    }
    return out;
}

Tensor branch_trunk_contract(const Tensor& branch, const Tensor& trunk, double bias) {
    if (branch.rank() != 2)
        throw shape_error("branch_trunk_contract: branch must be [N,p], got " + branch.shape_str());
    if (trunk.rank() < 2)
        throw shape_error("branch_trunk_contract: trunk must be [n_1,..,n_d,p], got " + trunk.shape_str());
    const std::size_t p = branch.dim(1);
    if (trunk.shape().back() != p)
        throw shape_error("branch_trunk_contract: p mismatch, branch " + branch.shape_str() +
                          " vs trunk " + trunk.shape_str());
    const std::size_t n_samples = branch.dim(0);
    const std::size_t lattice = trunk.size() / p;

    std::vector<std::size_t> out_shape{n_samples};
    for (std::size_t a = 0; a + 1 < trunk.rank(); ++a) out_shape.push_back(trunk.dim(a));
    Tensor out(out_shape);

    const double* b = branch.data();
    const double* t = trunk.data();
    double* o = out.data();
    parallel_for(n_samples, n_samples * lattice * p, [&](std::size_t s) {
        double* orow = o + s * lattice;
        for (std::size_t m = 0; m < lattice; ++m) {
            double acc = bias;
            const double* trow = t + m * p;
            const double* brow = b + s * p;
            for (std::size_t k = 0; k < p; ++k) acc += brow[k] * trow[k];
            orow[m] = acc;
        }
    });
    return out;
}

} // namespace sepdon
