#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sepdon/model.hpp"
#include "sepdon/problem.hpp"
#include "sepdon/train.hpp"

namespace sepdon {

// Forward-pass accounting for one optimizer step over the full plan.
//
// Counting convention (the conventional-DeepONet cost model): each loss term
// has a set of constraint sites; a vanilla network evaluates branch and trunk
// once per (function, site) pair, so each network runs N * sites passes per
// term. The separable trunk runs one pass per axis point (sum over axes, per
// term) and the branch runs once per function per step. A periodic boundary
// pair (both column ends at one t) counts as a single site.
struct PassCounts {
    std::size_t branch_passes = 0;
    std::vector<std::size_t> trunk_passes_by_term; // residual, bc, ic [, heat edges]
    std::size_t trunk_total = 0;
    std::size_t total = 0; // branch + trunk (separable); per-network pass total (vanilla)
};

PassCounts count_passes(const ProblemSpec& problem, Variant variant, std::size_t n_train);

// Jacobian of the lattice outputs with respect to the trunk inputs:
// separable (sum n_j, prod n_j); vanilla (prod n_j, prod n_j).
std::pair<std::size_t, std::size_t> jacobian_dims(const std::vector<std::size_t>& axes,
                                                  Variant variant);

struct SweepRow {
    std::size_t n = 0;
    std::string variant;
    double ms_per_iter = 0;
    std::size_t passes = 0;
    std::size_t jacobian_rows = 0;
    std::size_t jacobian_cols = 0;
};

struct SweepConfig {
    std::vector<std::size_t> n_list{10, 20, 40, 80};
    std::vector<Variant> variants{Variant::separable, Variant::vanilla};
    std::size_t iters = 5;
    std::size_t warmup = 2;
    std::size_t n_train = 8;
    std::size_t sensors = 10;
    std::size_t p = 4;
    std::size_t r = 4;
    std::vector<std::size_t> hidden = std::vector<std::size_t>(6, 100);
    std::uint64_t seed = 0;
};

// Times full optimizer steps of a Burgers-style d=2 residual plan at each n,
// one row per (n, variant); variants run sequentially on identical inits.
std::vector<SweepRow> scaling_sweep(const SweepConfig& config);

void write_sweep_csv(const std::string& path, std::span<const SweepRow> rows);

// Least-squares growth exponent of ms against n for one variant's rows.
double growth_exponent(std::span<const SweepRow> rows, const std::string& variant);

// Median per-iteration wall time of train() steps for an arbitrary setup.
double measure_ms_per_iter(const ProblemSpec& problem, const DeepONetModel& model,
                           const Dataset& dataset, const TrainConfig& config, std::size_t warmup,
                           std::size_t iters);

} // namespace sepdon
