#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sepdon/tensor.hpp"

namespace sepdon {

// Fully-connected tanh network: tanh on every hidden layer, linear output.
struct MlpSpec {
    std::size_t input_dim = 1;
    std::vector<std::size_t> hidden;
    std::size_t output_dim = 1;

    // (fan_in, fan_out) per weight layer, input to output.
    std::vector<std::pair<std::size_t, std::size_t>> layer_dims() const;
    std::size_t param_count() const; // sum of fan_in*fan_out + fan_out
};

enum class Variant { vanilla, separable };

// Architecture of one DeepONet. The trunk output widths are derived:
//   vanilla:   one trunk, input d,  output p * fields
//   separable: d trunks,  input 1,  output p * r * fields
// Output neurons are grouped field-major; within a field the separable
// layout is k-major then rank ((f, k, i) -> f*p*r + k*r + i).
struct DeepONetConfig {
    Variant variant = Variant::separable;
    std::size_t d = 2;       // trunk coordinate dimensionality
    std::size_t p = 20;      // latent dimension of the branch-trunk dot product
    std::size_t r = 20;      // tensor rank (separable only)
    std::size_t fields = 1;  // number of output fields (trunk splitting)
    std::size_t sensors = 101; // branch input width
    std::vector<std::size_t> branch_hidden;
    std::vector<std::size_t> trunk_hidden;

    MlpSpec branch_spec() const;
    MlpSpec trunk_spec() const;
    std::size_t num_trunks() const { return variant == Variant::separable ? d : 1; }
    void validate() const;
};

// Exact trainable-parameter count, including the per-field output biases.
std::size_t count_params(const DeepONetConfig& config);

// Parameter container. Layout of `params`:
//   branch W0,b0,...,WL,bL, then each trunk's W0,b0,...,WL,bL, then
//   the per-field output biases as one [fields] tensor.
struct DeepONetModel {
    DeepONetConfig config;
    std::vector<Tensor> params;

    std::size_t branch_tensor_base() const { return 0; }
    std::size_t trunk_tensor_base(std::size_t trunk_index) const;
    std::span<const Tensor> branch_params() const;
    std::span<const Tensor> trunk_params(std::size_t trunk_index) const;
    const Tensor& output_biases() const { return params.back(); }
    Tensor& output_biases() { return params.back(); }
};

// Glorot-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero biases,
// zero output biases; bit-deterministic per seed.
DeepONetModel init_params(const DeepONetConfig& config, std::uint64_t seed);

// Plain forward pass of one MLP; layer_params is the W,b,W,b,... slice.
Tensor mlp_forward(const MlpSpec& spec, std::span<const Tensor> layer_params, const Tensor& x);

struct SeparableTrunkResult {
    std::vector<Tensor> fields; // per field: [n_1,..,n_d, p]
    std::size_t mlp_passes = 0; // total sub-trunk input rows evaluated
};
// Evaluates sub-trunk j once per point of axis j and recombines per field.
SeparableTrunkResult trunk_forward_separable(const DeepONetModel& model,
                                             std::span<const Tensor> axes);

struct VanillaTrunkResult {
    std::vector<Tensor> fields; // per field: [M, p]
    std::size_t mlp_passes = 0;
};
VanillaTrunkResult trunk_forward_vanilla(const DeepONetModel& model, const Tensor& points);

struct DeepONetEvalResult {
    std::vector<Tensor> fields; // per field: [N, n_1,..,n_d] (or [N, M])
    std::size_t branch_passes = 0;
    std::size_t trunk_passes = 0;
};
// Factorized evaluation on a lattice given by coordinate axes.
DeepONetEvalResult deeponet_eval(const DeepONetModel& model, const Tensor& branch_in,
                                 std::span<const Tensor> axes);
// Pointwise evaluation at explicit coordinates [M, d]. For separable models
// the trunk features are reconstructed per point by the product-sum rule, so
// this is the reference path for factorized-vs-pointwise equivalence.
DeepONetEvalResult deeponet_eval_points(const DeepONetModel& model, const Tensor& branch_in,
                                        const Tensor& points);

// Checkpoint: <path>.json manifest + <path>.bin little-endian f64 blob,
// parameters ordered branch-then-trunks, layer-major, output biases last.
void save_checkpoint(const DeepONetModel& model, const std::string& path_base,
                     std::uint64_t seed, std::uint64_t step);
struct Checkpoint {
    DeepONetModel model;
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
};
Checkpoint load_checkpoint(const std::string& path_base);

} // namespace sepdon
