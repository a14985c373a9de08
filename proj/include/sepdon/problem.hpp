#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace sepdon {

enum class ProblemKind { burgers, biot, heat };

std::string problem_name(ProblemKind kind);
ProblemKind problem_from_name(const std::string& name);

// Physical constants, domain sampling plan and loss weights of one benchmark.
// Factory functions below fill in the full-scale values; desk-scale presets
// override the counts only.
struct ProblemSpec {
    ProblemKind kind = ProblemKind::burgers;

    // constants
    double nu = 0.01;          // burgers viscosity
    double lam2mu = 3.0;       // biot lambda + 2 mu (unit constants)
    double k_over_rhog = 1.0;  // biot permeability / (rho g)
    double alpha_min = 1e-2;   // heat diffusivity range
    double alpha_max = 1.0;
    bool alpha_log_uniform = false; // optional log-uniform alpha gridding

    // loss weights: total = w_physics * physics + w_bc * bc + w_ic * ic
    double weight_physics = 1.0;
    double weight_bc = 1.0;
    double weight_ic = 1.0;

    // residual lattice sizes, one per trunk axis
    std::vector<std::size_t> residual_axes;
    bool residual_random = false; // burgers: random axis values, drawn once per run

    // data-term sizes
    std::size_t bc_nt = 100;     // burgers: t points per boundary side
    std::size_t ic_nx = 101;     // burgers: ic sensor count
    std::size_t biot_n = 101;    // biot: boundary / ic axis points
    std::size_t heat_ic_n = 51;  // heat: interior ic grid per spatial axis
    std::size_t heat_bc_n = 51;  // heat: bc points per free axis
    std::size_t heat_c_n = 51;   // heat: alpha points for the data terms

    // evaluation lattice (reference comparisons); heat omits the c axis
    std::vector<std::size_t> eval_axes;

    std::size_t sensors = 101; // branch input width (heat: 1)

    std::size_t trunk_dim() const { return residual_axes.size(); }
    std::size_t num_fields() const { return kind == ProblemKind::biot ? 2 : 1; }
};

ProblemSpec burgers_problem(); // paper scale: 50x50 random residual, bc 100, ic 101
ProblemSpec biot_problem();    // 101-point axes everywhere
ProblemSpec heat_problem();    // 31^4 residual, 51-point data grids

} // namespace sepdon
