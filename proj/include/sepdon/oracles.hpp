#pragma once

#include <cstddef>
#include <functional>

#include "sepdon/tensor.hpp"

namespace sepdon {

// ||pred - ref||_2 / ||ref||_2 over all elements. Shapes must match and the
// reference norm must be positive.
double relative_l2(const Tensor& pred, const Tensor& ref);

// Fourier-series solution of the unit-square heat problem with constant
// interior initial temperature T0 and zero boundary temperature:
//   T = sum_{m,n odd <= terms} 16 T0/(m n pi^2) sin(m pi x) sin(n pi y)
//       exp(-alpha (m^2+n^2) pi^2 t)
// evaluated through its exact 1-d product factorization.
double heat_analytic(double T0, double alpha, double x, double y, double t,
                     std::size_t terms = 199);

// Terzaghi step-load consolidation with unit constants (lambda = mu = k =
// rho = g = 1, so the oedometric modulus is 3 and c_v = 3), drained top at
// z = 0, impermeable bottom at z = 1, unit load applied at t = 0:
//   p(z,t) = sum_{k odd} (4 / k pi) sin(k pi z / 2) exp(-k^2 pi^2 c_v t / 4)
double terzaghi_step_pressure(double z, double t, double cv = 3.0, std::size_t terms = 1999);
// Matching displacement, u(z,t) = (1-z)/3 - sum_k 8/(3 k^2 pi^2) cos(k pi z/2) e^{-...}.
double terzaghi_step_displacement(double z, double t, double cv = 3.0, std::size_t terms = 1999);

// Viscous Burgers on the periodic unit interval: Fourier pseudo-spectral in x
// with 2/3-rule dealiasing, classical RK4 in t. The initial profile is given
// as samples on a uniform grid over [0,1] (endpoint included and assumed to
// wrap); it enters the solver by trigonometric interpolation. Returns the
// solution sampled at (x_eval, t_eval), shape [n_x, n_t]. Throws
// solver_divergence_error if the state leaves the finite range.
Tensor burgers_solve(const Tensor& u0_samples, double nu, const Tensor& x_eval,
                     const Tensor& t_eval, std::size_t modes = 256, double dt = 1e-4);

struct BiotSolution {
    Tensor u; // displacement [n_z, n_t] on the evaluation grid
    Tensor p; // pore pressure [n_z, n_t]
};

// Coupled 1-d consolidation, unit constants: backward Euler in time, central
// second-order differences in z on [0,1] with
//   3 u_zz - p_z = 0,   u_tz - p_zz = 0,
//   p(0,t) = 0, u(1,t) = 0, p_z(1,t) = 0, u(z,0) = 0, p(z,0) = f(0),
// and the load imposed through the z=0 stress balance 3 u_z(0,t) - p(0,t) = -f(t).
// The load is a callable f(t) on [0,1].
BiotSolution biot_solve(const std::function<double(double)>& load, const Tensor& z_eval,
                        const Tensor& t_eval, std::size_t nz = 201, std::size_t nt = 2001);

// Same with the load given as samples on a uniform t-grid (linear interpolation).
BiotSolution biot_solve_sampled(const Tensor& load_samples, const Tensor& z_eval,
                                const Tensor& t_eval, std::size_t nz = 201, std::size_t nt = 2001);

} // namespace sepdon
