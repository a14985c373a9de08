#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "sepdon/data.hpp"
#include "sepdon/hyperdual.hpp"
#include "sepdon/model.hpp"
#include "sepdon/problem.hpp"
#include "sepdon/tape.hpp"
#include "sepdon/tensor.hpp"

namespace sepdon {

// Value and directional-derivative lattices of one output field, flattened to
// [N, prod(n_j)]. d1/d2/d12 are zero tensors when the pass was not seeded.
struct FieldComponents {
    Tensor v, d1, d2, d12;
};

// A differentiable multi-field function of lattice coordinates. dir1/dir2
// select the coordinate axes carrying the two tangent seeds (-1 = unseeded);
// dir1 == dir2 yields the pure second derivative in d12.
class FieldEvaluator {
public:
    virtual ~FieldEvaluator() = default;
    virtual std::size_t num_fields() const = 0;
    virtual std::size_t num_samples() const = 0;
    virtual std::vector<FieldComponents> eval(std::span<const Tensor> axes, int dir1,
                                              int dir2) const = 0;
};

// DeepONet-backed evaluator (either variant), bound to a branch batch.
class ModelField : public FieldEvaluator {
public:
    ModelField(const DeepONetModel& model, Tensor branch_in);
    std::size_t num_fields() const override;
    std::size_t num_samples() const override;
    std::vector<FieldComponents> eval(std::span<const Tensor> axes, int dir1, int dir2) const override;

private:
    const DeepONetModel& model_;
    Tensor branch_in_;
};

// Closed-form fields given as pointwise hyper-dual callables (one per output
// field), evaluated over the meshgrid of the axes. Sample dimension is 1.
class ClosedFormField : public FieldEvaluator {
public:
    using Fn = std::function<HyperDual(std::span<const HyperDual>)>;
    explicit ClosedFormField(std::vector<Fn> fields);
    std::size_t num_fields() const override { return fields_.size(); }
    std::size_t num_samples() const override { return 1; }
    std::vector<FieldComponents> eval(std::span<const Tensor> axes, int dir1, int dir2) const override;

private:
    std::vector<Fn> fields_;
};

// ---------------------------------------------------------------------------
// Residual operators (evaluator-agnostic)
// ---------------------------------------------------------------------------

// s_t + s s_x - nu s_xx on the (x,t) lattice -> [N, n_x, n_t]
Tensor burgers_residual(const FieldEvaluator& field, const Tensor& x_axis, const Tensor& t_axis,
                        double nu);

// r1 = (lambda+2mu) u_zz - p_z,  r2 = u_tz - (k/(rho g)) p_zz  -> pair of [N, n_z, n_t]
std::pair<Tensor, Tensor> biot_residuals(const FieldEvaluator& field, const Tensor& z_axis,
                                         const Tensor& t_axis, double lam2mu, double k_over_rhog);

// T_t - c^2 (T_xx + T_yy) on the (x,y,t,c) lattice -> [N, n_x, n_y, n_t, n_c]
Tensor heat_residual(const FieldEvaluator& field, const Tensor& x_axis, const Tensor& y_axis,
                     const Tensor& t_axis, const Tensor& c_axis);

// ---------------------------------------------------------------------------
// Loss assembly
// ---------------------------------------------------------------------------

struct LossBreakdown {
    double physics = 0.0;
    double ic = 0.0;
    double bc = 0.0;
    double total = 0.0;
    double weight_physics = 1.0;
    double weight_bc = 1.0;
    double weight_ic = 1.0;
};

// The per-run coordinate lattices of every loss term, drawn once per run.
struct ProblemAxes {
    std::vector<Tensor> residual;
    std::vector<Tensor> bc; // unused for heat
    std::vector<Tensor> ic;
    std::vector<std::vector<Tensor>> bc_sets; // heat: one lattice per edge
    static ProblemAxes build(const ProblemSpec& problem, Rng& run_rng);
};

LossBreakdown burgers_losses(const FieldEvaluator& field, const Tensor& u_batch,
                             const ProblemSpec& problem, const ProblemAxes& axes);
// g_batch: reference displacement trace u(0,t) per sample on the bc t-grid;
// f_batch: load samples (branch input), f(0) feeds the pressure initial term.
LossBreakdown biot_losses(const FieldEvaluator& field, const Tensor& f_batch,
                          const Tensor& g_batch, const ProblemSpec& problem,
                          const ProblemAxes& axes);
LossBreakdown heat_losses(const FieldEvaluator& field, const Tensor& t0_batch,
                          const ProblemSpec& problem, const ProblemAxes& axes);

// Weighted mean-squared combination used by every loss: mean over samples and
// points of squared terms, then the problem's weighted sum.
double total_loss(const LossBreakdown& terms);

// ---------------------------------------------------------------------------
// Training-path builders: the same losses recorded on a tape
// ---------------------------------------------------------------------------

// A DeepONet whose parameters are tape leaves; caches the branch embedding.
struct ModelOnTape {
    const DeepONetConfig* config = nullptr;
    std::vector<Tape::Id> params;
    Tape::Id branch_out = -1; // [N, p]

    static ModelOnTape make(Tape& tape, const DeepONetModel& model, const Tensor& branch_in,
                            bool trainable);
    static ModelOnTape from_ids(Tape& tape, const DeepONetConfig& config,
                                std::span<const Tape::Id> param_ids, const Tensor& branch_in);

    // Per-field lattice outputs [N, prod n_j] with tangent seeds on axes
    // dir1/dir2 (-1 = unseeded). Components follow the seed layout.
    std::vector<Tape::Id> lattice_fields(Tape& tape, std::span<const Tensor> axes, int dir1,
                                         int dir2) const;
    std::size_t trunk_value_passes(std::span<const Tensor> axes) const;
};

struct TapeLoss {
    Tape::Id total = -1;
    Tape::Id physics = -1;
    Tape::Id ic = -1;
    Tape::Id bc = -1;
    std::size_t trunk_passes = 0; // value passes per loss evaluation
};

TapeLoss build_burgers_loss(Tape& tape, const ModelOnTape& model, const Tensor& u_batch,
                            const ProblemSpec& problem, const ProblemAxes& axes);
TapeLoss build_biot_loss(Tape& tape, const ModelOnTape& model, const Tensor& f_batch,
                         const Tensor& g_batch, const ProblemSpec& problem,
                         const ProblemAxes& axes);
TapeLoss build_heat_loss(Tape& tape, const ModelOnTape& model, const Tensor& t0_batch,
                         const ProblemSpec& problem, const ProblemAxes& axes);

TapeLoss build_problem_loss(Tape& tape, const ModelOnTape& model, const Tensor& branch_batch,
                            const Tensor* g_batch, const ProblemSpec& problem,
                            const ProblemAxes& axes);

} // namespace sepdon
