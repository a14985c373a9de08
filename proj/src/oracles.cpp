#include "sepdon/oracles.hpp"

#include <cmath>
#include <complex>
#include <mutex>
#include <numbers>
#include <vector>

#include <fftw3.h>

#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include "sepdon/errors.hpp"
#include "sepdon/mathutil.hpp"

namespace sepdon {

double relative_l2(const Tensor& pred, const Tensor& ref) {
    if (pred.shape() != ref.shape())
        throw shape_error("relative_l2: shape mismatch " + pred.shape_str() + " vs " + ref.shape_str());
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        const double d = pred[i] - ref[i];
        num += d * d;
        den += ref[i] * ref[i];
    }
    if (den == 0.0) throw std::invalid_argument("relative_l2: reference norm is zero");
    return std::sqrt(num / den);
}

double heat_analytic(double T0, double alpha, double x, double y, double t, std::size_t terms) {
    // 1-d factor S(xi, tau) = sum_{m odd} sin(m pi xi)/m exp(-m^2 pi^2 tau)
    const double tau = alpha * t;
    auto series = [&](double xi) {
        double acc = 0.0;
        for (std::size_t m = 1; m <= terms; m += 2) {
            const double decay = std::exp(-static_cast<double>(m) * static_cast<double>(m) *
                                          std::numbers::pi * std::numbers::pi * tau);
            if (decay == 0.0) break;
            acc += sin_pi(static_cast<double>(m) * xi) / static_cast<double>(m) * decay;
        }
        return acc;
    };
    const double c = 16.0 * T0 / (std::numbers::pi * std::numbers::pi);
    return c * series(x) * series(y);
}

double terzaghi_step_pressure(double z, double t, double cv, std::size_t terms) {
    double acc = 0.0;
    for (std::size_t k = 1; k <= terms; k += 2) {
        const double kd = static_cast<double>(k);
        const double lambda = kd * kd * std::numbers::pi * std::numbers::pi * cv / 4.0;
        const double decay = std::exp(-lambda * t);
        if (decay == 0.0 && t > 0.0) break;
        acc += (4.0 / (kd * std::numbers::pi)) * sin_pi(kd * z / 2.0) * decay;
    }
    return acc;
}

double terzaghi_step_displacement(double z, double t, double cv, std::size_t terms) {
    double acc = (1.0 - z) / 3.0;
    for (std::size_t k = 1; k <= terms; k += 2) {
        const double kd = static_cast<double>(k);
        const double lambda = kd * kd * std::numbers::pi * std::numbers::pi * cv / 4.0;
        const double decay = std::exp(-lambda * t);
        if (decay == 0.0 && t > 0.0) break;
        acc -= 8.0 / (3.0 * kd * kd * std::numbers::pi * std::numbers::pi) * cos_pi(kd * z / 2.0) * decay;
    }
    return acc;
}

// ---------------------------------------------------------------------------
// Burgers pseudo-spectral solver
// ---------------------------------------------------------------------------

namespace {

std::mutex fftw_plan_mutex;

struct FftPair {
    std::size_t n;
    fftw_complex* buf;
    fftw_plan fwd;
    fftw_plan bwd;

    explicit FftPair(std::size_t n_) : n(n_) {
        std::lock_guard<std::mutex> lock(fftw_plan_mutex);
        buf = fftw_alloc_complex(n);
        fwd = fftw_plan_dft_1d(static_cast<int>(n), buf, buf, FFTW_FORWARD, FFTW_ESTIMATE);
        bwd = fftw_plan_dft_1d(static_cast<int>(n), buf, buf, FFTW_BACKWARD, FFTW_ESTIMATE);
    }
    ~FftPair() {
        std::lock_guard<std::mutex> lock(fftw_plan_mutex);
        fftw_destroy_plan(fwd);
        fftw_destroy_plan(bwd);
        fftw_free(buf);
    }
    FftPair(const FftPair&) = delete;
    FftPair& operator=(const FftPair&) = delete;
};

} // namespace

Tensor burgers_solve(const Tensor& u0_samples, double nu, const Tensor& x_eval,
                     const Tensor& t_eval, std::size_t modes, double dt) {
    if (u0_samples.rank() != 1 || u0_samples.size() < 3)
        throw shape_error("burgers_solve: u0 must be a vector of at least 3 samples");
    if (modes < 8) throw std::invalid_argument("burgers_solve: need at least 8 modes");
    const std::size_t n_in = u0_samples.size() - 1; // unique periodic samples
    const std::size_t m = modes;

    // Trigonometric interpolation of the initial profile: slow DFT of the
    // unique samples, then injection into the solver's wavenumber layout.
    std::vector<std::complex<double>> coef(n_in);
    for (std::size_t k = 0; k < n_in; ++k) {
        std::complex<double> acc = 0.0;
        for (std::size_t j = 0; j < n_in; ++j) {
            const double ang = -2.0 * static_cast<double>(k * j) / static_cast<double>(n_in);
            acc += u0_samples[j] * std::complex<double>(cos_pi(ang), sin_pi(ang));
        }
        coef[k] = acc / static_cast<double>(n_in);
    }

    std::vector<std::complex<double>> uhat(m, 0.0);
    const std::size_t kmax_in = n_in / 2 - 1;
    for (std::size_t k = 0; k <= kmax_in && k <= m / 2 - 1; ++k) {
        uhat[k] = coef[k];
        if (k > 0) uhat[m - k] = coef[n_in - k];
    }

    const double two_pi = 2.0 * std::numbers::pi;
    auto wavenumber = [&](std::size_t k) -> double {
        return k <= m / 2 ? static_cast<double>(k) : static_cast<double>(k) - static_cast<double>(m);
    };
    const double kcut = static_cast<double>(m) / 3.0;

    FftPair fft(m);
    std::vector<std::complex<double>> phys(m), work(m);

    // rhs(uhat) = -i 2 pi k dealias(fft(u^2/2)) - nu (2 pi k)^2 uhat
    auto rhs = [&](const std::vector<std::complex<double>>& in, std::vector<std::complex<double>>& out) {
        for (std::size_t k = 0; k < m; ++k) {
            fft.buf[k][0] = in[k].real();
            fft.buf[k][1] = in[k].imag();
        }
        fftw_execute(fft.bwd);
        for (std::size_t j = 0; j < m; ++j) {
            const double uj = fft.buf[j][0] / static_cast<double>(m);
            fft.buf[j][0] = 0.5 * uj * uj;
            fft.buf[j][1] = 0.0;
        }
        fftw_execute(fft.fwd);
        for (std::size_t k = 0; k < m; ++k) {
            const double kw = wavenumber(k);
            std::complex<double> w(fft.buf[k][0], fft.buf[k][1]);
            if (std::fabs(kw) > kcut) w = 0.0;
            const std::complex<double> conv = std::complex<double>(0.0, -two_pi * kw) * w;
            out[k] = conv - nu * two_pi * two_pi * kw * kw * in[k];
        }
    };

    // Evaluation bookkeeping: march with fixed dt, snapshot at the requested
    // times (nearest step; eval grids are expected to be multiples of dt).
    Tensor out({x_eval.size(), t_eval.size()});
    std::vector<std::size_t> target_steps(t_eval.size());
    for (std::size_t j = 0; j < t_eval.size(); ++j)
        target_steps[j] = static_cast<std::size_t>(std::llround(t_eval[j] / dt));

    std::vector<std::complex<double>> k1(m), k2(m), k3(m), k4(m), tmp(m);
    auto snapshot = [&](std::size_t tcol) {
        for (std::size_t i = 0; i < x_eval.size(); ++i) {
            double acc = 0.0;
            for (std::size_t k = 0; k < m; ++k) {
                const double kw = wavenumber(k);
                const double ang = 2.0 * kw * x_eval[i];
                acc += uhat[k].real() * cos_pi(ang) - uhat[k].imag() * sin_pi(ang);
            }
            if (!std::isfinite(acc)) throw solver_divergence_error("burgers_solve: non-finite state");
            out.at2(i, tcol) = acc;
        }
    };

    std::size_t max_step = 0;
    for (std::size_t s : target_steps) max_step = std::max(max_step, s);
    std::size_t next_col = 0;
    for (std::size_t step = 0; step <= max_step; ++step) {
        while (next_col < t_eval.size() && target_steps[next_col] == step) snapshot(next_col++);
        if (step == max_step) break;
        rhs(uhat, k1);
        for (std::size_t k = 0; k < m; ++k) tmp[k] = uhat[k] + 0.5 * dt * k1[k];
        rhs(tmp, k2);
        for (std::size_t k = 0; k < m; ++k) tmp[k] = uhat[k] + 0.5 * dt * k2[k];
        rhs(tmp, k3);
        for (std::size_t k = 0; k < m; ++k) tmp[k] = uhat[k] + dt * k3[k];
        rhs(tmp, k4);
        for (std::size_t k = 0; k < m; ++k)
            uhat[k] += dt / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
        if (!std::isfinite(uhat[0].real()))
            throw solver_divergence_error("burgers_solve: non-finite state at step " + std::to_string(step));
    }
    while (next_col < t_eval.size()) snapshot(next_col++); // duplicated trailing times
    return out;
}

// ---------------------------------------------------------------------------
// Biot consolidation finite-difference solver
// ---------------------------------------------------------------------------

BiotSolution biot_solve(const std::function<double(double)>& load, const Tensor& z_eval,
                        const Tensor& t_eval, std::size_t nz, std::size_t nt) {
    if (nz < 5 || nt < 2) throw std::invalid_argument("biot_solve: grid too small");
    const double lam2mu = 3.0; // lambda + 2 mu with unit constants
    const double dz = 1.0 / static_cast<double>(nz - 1);
    const double dtau = 1.0 / static_cast<double>(nt - 1);

    // Unknown ordering: [u_0, p_0, u_1, p_1, ...]; rows follow the same order.
    using Trip = Eigen::Triplet<double>;
    std::vector<Trip> trips;
    auto iu = [&](std::size_t i) { return static_cast<int>(2 * i); };
    auto ip = [&](std::size_t i) { return static_cast<int>(2 * i + 1); };

    // z = 0: stress balance row for u, Dirichlet row for p.
    trips.emplace_back(iu(0), iu(0), lam2mu * -3.0 / (2.0 * dz));
    trips.emplace_back(iu(0), iu(1), lam2mu * 4.0 / (2.0 * dz));
    trips.emplace_back(iu(0), iu(2), lam2mu * -1.0 / (2.0 * dz));
    trips.emplace_back(iu(0), ip(0), -1.0);
    trips.emplace_back(ip(0), ip(0), 1.0);

    for (std::size_t i = 1; i + 1 < nz; ++i) {
        // elliptic: 3 u_zz - p_z = 0
        trips.emplace_back(iu(i), iu(i - 1), lam2mu / (dz * dz));
        trips.emplace_back(iu(i), iu(i), -2.0 * lam2mu / (dz * dz));
        trips.emplace_back(iu(i), iu(i + 1), lam2mu / (dz * dz));
        trips.emplace_back(iu(i), ip(i - 1), 1.0 / (2.0 * dz));
        trips.emplace_back(iu(i), ip(i + 1), -1.0 / (2.0 * dz));
        // transient: (u_z)_t - p_zz = 0, backward Euler
        trips.emplace_back(ip(i), iu(i + 1), 1.0 / (2.0 * dz * dtau));
        trips.emplace_back(ip(i), iu(i - 1), -1.0 / (2.0 * dz * dtau));
        trips.emplace_back(ip(i), ip(i - 1), -1.0 / (dz * dz));
        trips.emplace_back(ip(i), ip(i), 2.0 / (dz * dz));
        trips.emplace_back(ip(i), ip(i + 1), -1.0 / (dz * dz));
    }

    // z = L: u Dirichlet, one-sided p_z = 0.
    trips.emplace_back(iu(nz - 1), iu(nz - 1), 1.0);
    trips.emplace_back(ip(nz - 1), ip(nz - 1), 3.0 / (2.0 * dz));
    trips.emplace_back(ip(nz - 1), ip(nz - 2), -4.0 / (2.0 * dz));
    trips.emplace_back(ip(nz - 1), ip(nz - 3), 1.0 / (2.0 * dz));

    Eigen::SparseMatrix<double> a(static_cast<int>(2 * nz), static_cast<int>(2 * nz));
    a.setFromTriplets(trips.begin(), trips.end());
    Eigen::SparseLU<Eigen::SparseMatrix<double>> solver;
    solver.analyzePattern(a);
    solver.factorize(a);
    if (solver.info() != Eigen::Success)
        throw numeric_error("biot_solve: singular linear system");

    // Time levels we must keep for evaluation.
    std::vector<double> ugrid(nz, 0.0), pgrid(nz, load(0.0));
    // pressure Dirichlet wins at the corner
    pgrid[0] = 0.0;

    // March and collect snapshots at the evaluation times (nearest level).
    Tensor uout({z_eval.size(), t_eval.size()});
    Tensor pout({z_eval.size(), t_eval.size()});
    std::vector<std::size_t> target_levels(t_eval.size());
    for (std::size_t j = 0; j < t_eval.size(); ++j)
        target_levels[j] = static_cast<std::size_t>(std::llround(t_eval[j] / dtau));

    auto snapshot = [&](std::size_t tcol) {
        for (std::size_t zi = 0; zi < z_eval.size(); ++zi) {
            const double zpos = z_eval[zi] / dz;
            std::size_t i0 = static_cast<std::size_t>(std::min<double>(std::floor(zpos), static_cast<double>(nz - 2)));
            const double w = zpos - static_cast<double>(i0);
            uout.at2(zi, tcol) = (1.0 - w) * ugrid[i0] + w * ugrid[i0 + 1];
            pout.at2(zi, tcol) = (1.0 - w) * pgrid[i0] + w * pgrid[i0 + 1];
        }
    };

    std::size_t max_level = 0;
    for (std::size_t s : target_levels) max_level = std::max(max_level, s);
    max_level = std::min(max_level, nt - 1);

    Eigen::VectorXd b(2 * nz);
    std::size_t next_col = 0;
    for (std::size_t level = 0; level <= max_level; ++level) {
        while (next_col < t_eval.size() && target_levels[next_col] == level) snapshot(next_col++);
        if (level == max_level) break;
        const double tn = static_cast<double>(level + 1) * dtau;
        b.setZero();
        b[iu(0)] = -load(tn);
        for (std::size_t i = 1; i + 1 < nz; ++i)
            b[ip(i)] = (ugrid[i + 1] - ugrid[i - 1]) / (2.0 * dz * dtau);
        Eigen::VectorXd x = solver.solve(b);
        if (solver.info() != Eigen::Success) throw numeric_error("biot_solve: linear solve failed");
        for (std::size_t i = 0; i < nz; ++i) {
            ugrid[i] = x[iu(i)];
            pgrid[i] = x[ip(i)];
        }
    }
    while (next_col < t_eval.size()) snapshot(next_col++);
    return {std::move(uout), std::move(pout)};
}

BiotSolution biot_solve_sampled(const Tensor& load_samples, const Tensor& z_eval,
                                const Tensor& t_eval, std::size_t nz, std::size_t nt) {
    if (load_samples.rank() != 1 || load_samples.size() < 2)
        throw shape_error("biot_solve: load samples must be a vector");
    const std::size_t n = load_samples.size();
    auto f = [&](double t) {
        const double pos = t * static_cast<double>(n - 1);
        std::size_t i0 = static_cast<std::size_t>(std::min<double>(std::floor(pos), static_cast<double>(n - 2)));
        const double w = pos - static_cast<double>(i0);
        return (1.0 - w) * load_samples[i0] + w * load_samples[i0 + 1];
    };
    return biot_solve(f, z_eval, t_eval, nz, nt);
}

} // namespace sepdon
