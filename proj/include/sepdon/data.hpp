#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sepdon/problem.hpp"
#include "sepdon/rng.hpp"
#include "sepdon/tensor.hpp"

namespace sepdon {

// Gaussian process on [0,1] synthesized from its spectral density
//   S(k) = sigma^2 (tau^2 + (2 pi k)^2)^(-gamma)
// as a random Fourier series, periodic by construction:
//   u(x) = sum_{k=0}^{modes-1} sqrt(S(k)) (a_k cos 2 pi k x + b_k sin 2 pi k x)
struct GpSpectralSpec {
    double sigma = 25.0;
    double tau = 5.0;
    double gamma = 4.0;
    std::size_t modes = 2048;
};

// Stationary GP with kernel K(x,x') = amplitude * exp(-|x-x'|^2 / lengthscale_sq),
// sampled by dense Cholesky with escalating jitter.
struct GpRbfSpec {
    double amplitude = 0.2;
    double lengthscale_sq = 0.1;
    double jitter = 1e-10;
};

// Each sampler is a pure function of (spec, seed); samples are drawn from
// per-sample derived streams, so `count` and parallelism do not change values.
Tensor sample_gp_periodic_spectral(const GpSpectralSpec& spec, std::size_t n_points,
                                   std::size_t count, std::uint64_t seed);
Tensor sample_gp_rbf(const GpRbfSpec& spec, std::size_t n_points, std::size_t count,
                     std::uint64_t seed);

// Pointwise variance of the spectral sampler: sum_k S(k).
double gp_spectral_variance(const GpSpectralSpec& spec);

enum class AxisRole { residual, bc, ic, test };

// Coordinate axes for one loss term, ordered like the trunk inputs
// (burgers: x,t; biot: z,t; heat: x,y,t,c). Most roles produce a single
// lattice; the heat boundary produces one lattice per edge.
std::vector<std::vector<Tensor>> build_axes_sets(const ProblemSpec& problem, AxisRole role,
                                                 Rng& run_rng);
// Single-lattice convenience wrapper; throws if the role has several lattices.
std::vector<Tensor> build_axes(const ProblemSpec& problem, AxisRole role, Rng& run_rng);

struct Dataset {
    ProblemKind kind = ProblemKind::burgers;
    std::uint64_t seed = 0;
    Tensor train_branch; // [N_train, sensors]
    Tensor test_branch;  // [N_test, sensors]
    std::optional<Tensor> test_alpha;            // heat: [N_test]
    std::vector<Tensor> test_refs;               // per field: [N_test, prod(eval axes)]
    std::optional<Tensor> train_g;               // biot: u(0,t) per training load [N, biot_n]
    std::optional<Tensor> test_g;                // biot: same for the test split
    std::vector<Tensor> eval_axes;               // evaluation lattice axes

    std::size_t n_train() const { return train_branch.dim(0); }
    std::size_t n_test() const { return test_branch.dim(0); }
};

// Samples branch inputs (train and disjoint test split), runs the reference
// oracle on the test split, and packages everything with the evaluation grid.
Dataset make_dataset(const ProblemSpec& problem, std::size_t n_train, std::size_t n_test,
                     std::uint64_t seed);

// <path>.json manifest + <path>.bin little-endian f64 blob; round-trips are
// bit exact and guarded by a checksum.
void save_dataset(const Dataset& ds, const std::string& path_base);
Dataset load_dataset(const std::string& path_base);

} // namespace sepdon
