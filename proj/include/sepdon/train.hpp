#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sepdon/data.hpp"
#include "sepdon/model.hpp"
#include "sepdon/physics.hpp"
#include "sepdon/problem.hpp"
#include "sepdon/tensor.hpp"

namespace sepdon {

struct TrainConfig {
    std::size_t epochs = 10000;
    double lr0 = 1e-3;
    double decay_rate = 0.95;
    std::size_t decay_every = 1000;
    std::uint64_t seed = 0;
    std::size_t eval_every = 1000;      // test-error cadence; 0 = only at the end
    std::size_t checkpoint_every = 0;   // 0 = final checkpoint only
    std::size_t pair_batch = 100000;    // vanilla: (function, point) pairs per step
    std::size_t pair_chunk = 2048;      // vanilla: gradient-accumulation granularity
    std::size_t max_steps = 0;          // stop after this many optimizer steps (0 = epochs only)
    std::string out_dir;                // metrics and checkpoints ("" = keep in memory)
};

// Staircase schedule: lr0 * rate^floor(step / every).
double lr_at(const TrainConfig& config, std::size_t step);

struct AdamState {
    std::vector<Tensor> m1, m2;
    std::size_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    static AdamState like(const std::vector<Tensor>& params);
};

// Standard bias-corrected Adam update, in place. Throws numeric_error naming
// the offending tensor if a gradient is non-finite.
void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state,
               double lr);

struct StepRecord {
    std::size_t step = 0;
    double lr = 0;
    double total = 0, physics = 0, ic = 0, bc = 0;
    double test_rel_l2 = -1; // negative = not measured this step
    double ms = 0;
};

struct EvalReport {
    std::vector<double> per_sample_rel_l2;
    double aggregate_rel_l2 = -1; // concatenated over samples and fields
    double mean_rel_l2 = -1;
    std::vector<StepRecord> history;
    double wall_seconds = 0;
    std::size_t branch_passes_per_step = 0;
    std::size_t trunk_passes_per_step = 0;
};

struct TrainResult {
    DeepONetModel model;
    EvalReport report;
};

// Full training loop. Separable models run full-batch steps over the whole
// factorized plan; vanilla models run the conventional per-(function, point)
// pair batches, sampled without replacement each epoch. Metrics stream to
// <out_dir>/metrics.csv when out_dir is set; checkpoints follow the model
// checkpoint format.
TrainResult train(const ProblemSpec& problem, DeepONetModel model, const Dataset& dataset,
                  const TrainConfig& config);

// Relative L2 of model predictions against the dataset's reference solutions
// on the stored evaluation lattice.
EvalReport evaluate(const DeepONetModel& model, const ProblemSpec& problem,
                    const Dataset& dataset);

void write_metrics_csv(const std::string& path, std::span<const StepRecord> history);

} // namespace sepdon
