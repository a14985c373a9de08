#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sepdon/tensor.hpp"

namespace sepdon {

// Vector storage that skips value-initialization on resize; kernels that
// fully overwrite their outputs use it to avoid redundant zero-fill passes.
template <typename T>
struct uninit_allocator : std::allocator<T> {
    template <typename U>
    struct rebind {
        using other = uninit_allocator<U>;
    };
    template <typename U, typename... Args>
    void construct(U* p, Args&&... args) {
        if constexpr (sizeof...(Args) > 0) ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

// Component planes of a tape value. A value carries 1, 2 or 4 planes:
//   1 = plain reals, 2 = value + one tangent, 4 = full hyper-dual
//   (value, tangent1, tangent2, cross term).
// Planes are stored comp-major so every plane is contiguous.
struct TapeValue {
    std::vector<std::size_t> shape;
    int ncomp = 1;
    std::vector<double, uninit_allocator<double>> buf;

    TapeValue() = default;
    TapeValue(std::vector<std::size_t> s, int nc); // zero-filled
    static TapeValue uninit(std::vector<std::size_t> s, int nc);

    std::size_t numel() const;
    double* plane(int c) { return buf.data() + static_cast<std::size_t>(c) * numel(); }
    const double* plane(int c) const { return buf.data() + static_cast<std::size_t>(c) * numel(); }
    const double* plane_or_null(int c) const { return c < ncomp ? plane(c) : nullptr; }
};

// Append-only record of tensor operations over (possibly hyper-dual valued)
// primals. Each node stores its operands' indices and enough of the forward
// state for an exact reverse sweep; backward() visits nodes in strict reverse
// order of recording. Single-writer; independent tapes may run on independent
// threads.
class Tape {
public:
    using Id = int;

    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void reset();
    std::size_t num_nodes() const;

    // -- leaves -------------------------------------------------------------
    Id input(const Tensor& t, bool requires_grad);
    // Multi-component constant leaf (e.g. coordinates with tangent seeds).
    Id input_seeded(TapeValue v);

    // -- ops ----------------------------------------------------------------
    // y = x * W^T + b over the row axis; W is [out,in], b is [out] (optional,
    // added to the value plane only). x may carry any number of components.
    Id affine(Id x, Id w, Id b);
    Id tanh_(Id x);
    Id add(Id x, Id y);
    Id sub(Id x, Id y);
    Id mul(Id x, Id y); // hyper-dual elementwise product
    Id scale(Id x, double s);
    Id add_const(Id x, double s); // value plane only
    // Adds one element of a trainable bias vector to every value-plane entry.
    Id add_bias(Id x, Id bias, std::size_t element = 0);
    Id reshape(Id x, std::vector<std::size_t> shape);
    // Rank-r recombination of per-axis feature blocks [n_j,p,r] -> [prod n_j, p].
    Id outer_combine(std::span<const Id> parts);
    // out[s,m] = sum_k branch[s,k]*trunk[m,k]; branch must be single-component.
    Id contract_bt(Id branch, Id trunk);
    // Row-wise dot: out[b] = sum_k branch[b,k]*trunk[b,k] (the per-pair path).
    Id pair_dot(Id branch, Id trunk);
    Id extract(Id x, int comp); // select one component plane as a real tensor
    Id slice_cols(Id x, std::size_t col0, std::size_t col1); // contiguous [N,M] column block
    // out[s,m] = x[s,m] * w[m]; w is a single-component [M] vector.
    Id rowbcast_mul(Id x, Id w);
    // out[s,m] = x[s,m] - v[s]; single-component only.
    Id colbcast_sub(Id x, Id v);
    Id mean_sq(Id x);  // mean of squares over all elements -> scalar
    Id mean_all(Id x); // mean over all elements -> scalar
    Id lincomb(std::span<const Id> xs, std::span<const double> ws); // scalars -> scalar

    // -- results ------------------------------------------------------------
    const TapeValue& value(Id id) const;
    double scalar_value(Id id) const;
    Tensor value_tensor(Id id, int comp = 0) const;

    // Reverse sweep from a scalar loss node. Throws numeric_error naming the
    // first non-finite node if the forward pass produced one.
    void backward(Id loss);
    bool has_grad(Id id) const;
    Tensor grad_tensor(Id id) const; // adjoint of a single-component node

private:
    struct Node;
    Id push(Node n);
    std::vector<Node> nodes_;
};

// Reverse-mode gradient of a scalar loss with respect to a parameter list.
// The builder receives one leaf id per parameter tensor and returns the loss
// node. Returns one gradient tensor per parameter, in order.
using LossBuilder = std::function<Tape::Id(Tape&, std::span<const Tape::Id>)>;

std::vector<Tensor> grad_params(const LossBuilder& build, std::span<const Tensor> params,
                                double* loss_value = nullptr);

// Same mechanism for losses whose graph contains seeded forward passes
// (input derivatives up to second order flow through the recorded primals).
std::vector<Tensor> grad_params_through_jvp2(const LossBuilder& build,
                                             std::span<const Tensor> params,
                                             double* loss_value = nullptr);

} // namespace sepdon
