#include "sepdon/data.hpp"

#include <cmath>
#include <numbers>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <json.hpp>

#include "io_util.hpp"
#include "sepdon/errors.hpp"
#include "sepdon/mathutil.hpp"
#include "sepdon/oracles.hpp"
#include "sepdon/parallel.hpp"

namespace sepdon {

using nlohmann::json;

std::string problem_name(ProblemKind kind) {
    switch (kind) {
        case ProblemKind::burgers: return "burgers";
        case ProblemKind::biot: return "biot";
        case ProblemKind::heat: return "heat";
    }
    return "?";
}

ProblemKind problem_from_name(const std::string& name) {
    if (name == "burgers") return ProblemKind::burgers;
    if (name == "biot" || name == "consolidation") return ProblemKind::biot;
    if (name == "heat") return ProblemKind::heat;
    throw usage_error("unknown problem kind '" + name + "'");
}

ProblemSpec burgers_problem() {
    ProblemSpec p;
    p.kind = ProblemKind::burgers;
    p.residual_axes = {50, 50};
    p.residual_random = true;
    p.bc_nt = 100;
    p.ic_nx = 101;
    p.weight_ic = 20.0;
    p.eval_axes = {101, 101};
    p.sensors = 101;
    return p;
}

ProblemSpec biot_problem() {
    ProblemSpec p;
    p.kind = ProblemKind::biot;
    p.residual_axes = {101, 101};
    p.biot_n = 101;
    p.eval_axes = {101, 101};
    p.sensors = 101;
    return p;
}

ProblemSpec heat_problem() {
    ProblemSpec p;
    p.kind = ProblemKind::heat;
    p.residual_axes = {31, 31, 31, 31};
    p.heat_ic_n = 51;
    p.heat_bc_n = 51;
    p.heat_c_n = 51;
    p.eval_axes = {31, 31, 31};
    p.sensors = 1;
    return p;
}

// ---------------------------------------------------------------------------
// Samplers
// ---------------------------------------------------------------------------

double gp_spectral_variance(const GpSpectralSpec& spec) {
    double acc = 0.0;
    for (std::size_t k = 0; k < spec.modes; ++k) {
        const double w = 2.0 * std::numbers::pi * static_cast<double>(k);
        acc += spec.sigma * spec.sigma * std::pow(spec.tau * spec.tau + w * w, -spec.gamma);
    }
    return acc;
}

Tensor sample_gp_periodic_spectral(const GpSpectralSpec& spec, std::size_t n_points,
                                   std::size_t count, std::uint64_t seed) {
    if (n_points < 2) throw std::invalid_argument("sample_gp_periodic_spectral: need >= 2 points");
    // sqrt-spectrum and trig tables are shared across samples
    std::vector<double> amp(spec.modes);
    for (std::size_t k = 0; k < spec.modes; ++k) {
        const double w = 2.0 * std::numbers::pi * static_cast<double>(k);
        amp[k] = spec.sigma * std::pow(spec.tau * spec.tau + w * w, -spec.gamma / 2.0);
    }
    std::vector<double> cos_t(spec.modes * n_points), sin_t(spec.modes * n_points);
    for (std::size_t k = 0; k < spec.modes; ++k)
        for (std::size_t i = 0; i < n_points; ++i) {
            const double x = static_cast<double>(i) / static_cast<double>(n_points - 1);
            cos_t[k * n_points + i] = cos_pi(2.0 * static_cast<double>(k) * x);
            sin_t[k * n_points + i] = sin_pi(2.0 * static_cast<double>(k) * x);
        }

    Tensor out({count, n_points});
    Rng root = Rng(seed).split("gp-spectral");
    parallel_for(count, count * spec.modes * n_points, [&](std::size_t s) {
        Rng rng = root.split(s);
        std::vector<double> row(n_points, 0.0);
        for (std::size_t k = 0; k < spec.modes; ++k) {
            const double a = amp[k] * rng.next_normal();
            const double b = amp[k] * rng.next_normal();
            const double* ck = cos_t.data() + k * n_points;
            const double* sk = sin_t.data() + k * n_points;
            for (std::size_t i = 0; i < n_points; ++i) row[i] += a * ck[i] + b * sk[i];
        }
        for (std::size_t i = 0; i < n_points; ++i) out[s * n_points + i] = row[i];
    });
    return out;
}

Tensor sample_gp_rbf(const GpRbfSpec& spec, std::size_t n_points, std::size_t count,
                     std::uint64_t seed) {
    if (n_points < 2 || n_points > 512)
        throw std::invalid_argument("sample_gp_rbf: n_points must be in [2,512] (dense cholesky)");
    Eigen::MatrixXd kmat(n_points, n_points);
    for (std::size_t i = 0; i < n_points; ++i)
        for (std::size_t j = 0; j < n_points; ++j) {
            const double xi = static_cast<double>(i) / static_cast<double>(n_points - 1);
            const double xj = static_cast<double>(j) / static_cast<double>(n_points - 1);
            kmat(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                spec.amplitude * std::exp(-(xi - xj) * (xi - xj) / spec.lengthscale_sq);
        }
    Eigen::MatrixXd lower;
    double jitter = spec.jitter;
    bool ok = false;
    while (jitter <= 1e-6) {
        Eigen::MatrixXd attempt = kmat + jitter * Eigen::MatrixXd::Identity(kmat.rows(), kmat.cols());
        Eigen::LLT<Eigen::MatrixXd> llt(attempt);
        if (llt.info() == Eigen::Success) {
            lower = llt.matrixL();
            ok = true;
            break;
        }
        jitter *= 10.0;
    }
    if (!ok) throw numeric_error("sample_gp_rbf: cholesky failed even with jitter 1e-6");

    Tensor out({count, n_points});
    Rng root = Rng(seed).split("gp-rbf");
    parallel_for(count, count * n_points * n_points, [&](std::size_t s) {
        Rng rng = root.split(s);
        Eigen::VectorXd z(n_points);
        for (std::size_t i = 0; i < n_points; ++i) z[static_cast<Eigen::Index>(i)] = rng.next_normal();
        Eigen::VectorXd sample = lower * z;
        for (std::size_t i = 0; i < n_points; ++i) out[s * n_points + i] = sample[static_cast<Eigen::Index>(i)];
    });
    return out;
}

// ---------------------------------------------------------------------------
// Axes
// ---------------------------------------------------------------------------

namespace {

Tensor linspace(double lo, double hi, std::size_t n) {
    Tensor t({n});
    for (std::size_t i = 0; i < n; ++i)
        t[i] = n == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
    return t;
}

Tensor interior_linspace(double lo, double hi, std::size_t n) {
    Tensor t({n});
    for (std::size_t i = 0; i < n; ++i)
        t[i] = lo + (hi - lo) * static_cast<double>(i + 1) / static_cast<double>(n + 1);
    return t;
}

Tensor sorted_uniform(std::size_t n, Rng rng) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.next_unit();
    std::sort(v.begin(), v.end());
    return Tensor::from_vector(std::move(v));
}

// alpha grid mapped to the trunk coordinate c = sqrt(alpha)
Tensor c_axis(const ProblemSpec& p, std::size_t n) {
    Tensor t({n});
    for (std::size_t i = 0; i < n; ++i) {
        const double frac = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
        double alpha;
        if (p.alpha_log_uniform)
            alpha = p.alpha_min * std::pow(p.alpha_max / p.alpha_min, frac);
        else
            alpha = p.alpha_min + (p.alpha_max - p.alpha_min) * frac;
        t[i] = std::sqrt(alpha);
    }
    return t;
}

} // namespace

std::vector<std::vector<Tensor>> build_axes_sets(const ProblemSpec& p, AxisRole role, Rng& run_rng) {
    std::vector<std::vector<Tensor>> sets;
    switch (p.kind) {
        case ProblemKind::burgers: {
            if (role == AxisRole::residual) {
                std::vector<Tensor> axes;
                if (p.residual_random) {
                    axes.push_back(sorted_uniform(p.residual_axes[0], run_rng.split("axes/residual/x")));
                    axes.push_back(sorted_uniform(p.residual_axes[1], run_rng.split("axes/residual/t")));
                } else {
                    axes.push_back(linspace(0, 1, p.residual_axes[0]));
                    axes.push_back(linspace(0, 1, p.residual_axes[1]));
                }
                sets.push_back(std::move(axes));
            } else if (role == AxisRole::bc) {
                sets.push_back({Tensor({2}, {0.0, 1.0}), linspace(0, 1, p.bc_nt)});
            } else if (role == AxisRole::ic) {
                sets.push_back({linspace(0, 1, p.ic_nx), Tensor({1}, {0.0})});
            } else {
                sets.push_back({linspace(0, 1, p.eval_axes[0]), linspace(0, 1, p.eval_axes[1])});
            }
            break;
        }
        case ProblemKind::biot: {
            if (role == AxisRole::residual) {
                sets.push_back({linspace(0, 1, p.residual_axes[0]), linspace(0, 1, p.residual_axes[1])});
            } else if (role == AxisRole::bc) {
                // boundary conditions govern for t > 0; at t = 0 the initial
                // state holds everywhere, so the equidistant boundary times
                // live on (0,1] and the corner discontinuity at (0,0) falls
                // between sample points
                Tensor t({p.biot_n});
                for (std::size_t i = 0; i < p.biot_n; ++i)
                    t[i] = static_cast<double>(i + 1) / static_cast<double>(p.biot_n);
                sets.push_back({Tensor({2}, {0.0, 1.0}), std::move(t)});
            } else if (role == AxisRole::ic) {
                // likewise the initial pressure p(z,0)=f(0) holds off the
                // drain, where p=0 applies from the start
                Tensor z({p.biot_n});
                for (std::size_t i = 0; i < p.biot_n; ++i)
                    z[i] = static_cast<double>(i + 1) / static_cast<double>(p.biot_n);
                sets.push_back({std::move(z), Tensor({1}, {0.0})});
            } else {
                sets.push_back({linspace(0, 1, p.eval_axes[0]), linspace(0, 1, p.eval_axes[1])});
            }
            break;
        }
        case ProblemKind::heat: {
            if (role == AxisRole::residual) {
                std::vector<Tensor> axes;
                for (int a = 0; a < 3; ++a) axes.push_back(linspace(0, 1, p.residual_axes[static_cast<std::size_t>(a)]));
                axes.push_back(c_axis(p, p.residual_axes[3]));
                sets.push_back(std::move(axes));
            } else if (role == AxisRole::ic) {
                sets.push_back({interior_linspace(0, 1, p.heat_ic_n), interior_linspace(0, 1, p.heat_ic_n),
                                Tensor({1}, {0.0}), c_axis(p, p.heat_c_n)});
            } else if (role == AxisRole::bc) {
                const Tensor space = linspace(0, 1, p.heat_bc_n);
                const Tensor time = linspace(0, 1, p.heat_bc_n);
                const Tensor cax = c_axis(p, p.heat_c_n);
                Tensor zero({1}, {0.0});
                Tensor one({1}, {1.0});
                sets.push_back({zero, space, time, cax});
                sets.push_back({one, space, time, cax});
                sets.push_back({space, zero, time, cax});
                sets.push_back({space, one, time, cax});
            } else {
                sets.push_back({linspace(0, 1, p.eval_axes[0]), linspace(0, 1, p.eval_axes[1]),
                                linspace(0, 1, p.eval_axes[2])});
            }
            break;
        }
    }
    return sets;
}

std::vector<Tensor> build_axes(const ProblemSpec& p, AxisRole role, Rng& run_rng) {
    auto sets = build_axes_sets(p, role, run_rng);
    if (sets.size() != 1)
        throw usage_error("build_axes: role produces " + std::to_string(sets.size()) +
                          " lattices, use build_axes_sets");
    return std::move(sets[0]);
}

// ---------------------------------------------------------------------------
// Dataset construction
// ---------------------------------------------------------------------------

Dataset make_dataset(const ProblemSpec& p, std::size_t n_train, std::size_t n_test,
                     std::uint64_t seed) {
    Dataset ds;
    ds.kind = p.kind;
    ds.seed = seed;
    Rng root(seed);
    Rng axes_rng = root.split("dataset/axes");
    ds.eval_axes = build_axes(p, AxisRole::test, axes_rng);

    const std::size_t total = n_train + n_test;
    switch (p.kind) {
        case ProblemKind::burgers: {
            GpSpectralSpec gspec;
            Tensor all = sample_gp_periodic_spectral(gspec, p.sensors, total, root.split("dataset/branch").next_u64());
            ds.train_branch = Tensor({n_train, p.sensors});
            ds.test_branch = Tensor({n_test, p.sensors});
            for (std::size_t s = 0; s < n_train; ++s)
                for (std::size_t i = 0; i < p.sensors; ++i) ds.train_branch.at2(s, i) = all.at2(s, i);
            for (std::size_t s = 0; s < n_test; ++s)
                for (std::size_t i = 0; i < p.sensors; ++i) ds.test_branch.at2(s, i) = all.at2(n_train + s, i);

            const std::size_t m = ds.eval_axes[0].size() * ds.eval_axes[1].size();
            Tensor refs({std::max<std::size_t>(n_test, 1), m});
            for (std::size_t s = 0; s < n_test; ++s) {
                Tensor u0({p.sensors});
                for (std::size_t i = 0; i < p.sensors; ++i) u0[i] = ds.test_branch.at2(s, i);
                Tensor sol = burgers_solve(u0, p.nu, ds.eval_axes[0], ds.eval_axes[1]);
                for (std::size_t e = 0; e < m; ++e) refs.at2(s, e) = sol[e];
            }
            ds.test_refs.push_back(std::move(refs));
            break;
        }
        case ProblemKind::biot: {
            GpRbfSpec gspec;
            Tensor all = sample_gp_rbf(gspec, p.sensors, total, root.split("dataset/branch").next_u64());
            ds.train_branch = Tensor({n_train, p.sensors});
            ds.test_branch = Tensor({n_test, p.sensors});
            for (std::size_t s = 0; s < n_train; ++s)
                for (std::size_t i = 0; i < p.sensors; ++i) ds.train_branch.at2(s, i) = all.at2(s, i);
            for (std::size_t s = 0; s < n_test; ++s)
                for (std::size_t i = 0; i < p.sensors; ++i) ds.test_branch.at2(s, i) = all.at2(n_train + s, i);

            // the boundary trace is tabulated on the same time grid the
            // boundary loss samples
            Rng axes_probe(0);
            const Tensor tgrid = build_axes(p, AxisRole::bc, axes_probe)[1];
            const std::size_t m = ds.eval_axes[0].size() * ds.eval_axes[1].size();
            Tensor refs_u({std::max<std::size_t>(n_test, 1), m});
            Tensor refs_p({std::max<std::size_t>(n_test, 1), m});
            Tensor train_g({std::max<std::size_t>(n_train, 1), p.biot_n});
            Tensor test_g({std::max<std::size_t>(n_test, 1), p.biot_n});
            Tensor z0({1}, {0.0});
            for (std::size_t s = 0; s < total; ++s) {
                Tensor f({p.sensors});
                for (std::size_t i = 0; i < p.sensors; ++i)
                    f[i] = s < n_train ? ds.train_branch.at2(s, i) : ds.test_branch.at2(s - n_train, i);
                if (s < n_train) {
                    auto sol = biot_solve_sampled(f, z0, tgrid);
                    for (std::size_t i = 0; i < p.biot_n; ++i) train_g.at2(s, i) = sol.u.at2(0, i);
                } else {
                    auto sol = biot_solve_sampled(f, ds.eval_axes[0], ds.eval_axes[1]);
                    const std::size_t si = s - n_train;
                    for (std::size_t e = 0; e < m; ++e) {
                        refs_u.at2(si, e) = sol.u[e];
                        refs_p.at2(si, e) = sol.p[e];
                    }
                    // boundary trace on the biot_n grid for the loss data term
                    auto tr = biot_solve_sampled(f, z0, tgrid);
                    for (std::size_t i = 0; i < p.biot_n; ++i) test_g.at2(si, i) = tr.u.at2(0, i);
                }
            }
            ds.test_refs.push_back(std::move(refs_u));
            ds.test_refs.push_back(std::move(refs_p));
            ds.train_g = std::move(train_g);
            ds.test_g = std::move(test_g);
            break;
        }
        case ProblemKind::heat: {
            Rng branch_rng = root.split("dataset/branch");
            ds.train_branch = Tensor({n_train, 1});
            for (std::size_t s = 0; s < n_train; ++s) ds.train_branch[s] = branch_rng.next_unit();
            Rng test_rng = root.split("dataset/test");
            ds.test_branch = Tensor({n_test, 1});
            Tensor alphas({std::max<std::size_t>(n_test, 1)});
            for (std::size_t s = 0; s < n_test; ++s) {
                ds.test_branch[s] = test_rng.next_unit();
                alphas[s] = test_rng.next_uniform(p.alpha_min, p.alpha_max);
            }
            const std::size_t m =
                ds.eval_axes[0].size() * ds.eval_axes[1].size() * ds.eval_axes[2].size();
            Tensor refs({std::max<std::size_t>(n_test, 1), m});
            parallel_for(n_test, n_test * m * 100, [&](std::size_t s) {
                std::size_t e = 0;
                for (std::size_t ix = 0; ix < ds.eval_axes[0].size(); ++ix)
                    for (std::size_t iy = 0; iy < ds.eval_axes[1].size(); ++iy)
                        for (std::size_t it = 0; it < ds.eval_axes[2].size(); ++it, ++e)
                            refs.at2(s, e) = heat_analytic(ds.test_branch[s], alphas[s],
                                                           ds.eval_axes[0][ix], ds.eval_axes[1][iy],
                                                           ds.eval_axes[2][it]);
            });
            ds.test_alpha = std::move(alphas);
            ds.test_refs.push_back(std::move(refs));
            break;
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Dataset io
// ---------------------------------------------------------------------------

namespace {

char hexdigit(unsigned v) { return v < 10 ? static_cast<char>('0' + v) : static_cast<char>('a' + v - 10); }

std::string hex64(std::uint64_t v) {
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = hexdigit(static_cast<unsigned>(v & 0xf));
        v >>= 4;
    }
    return s;
}

} // namespace

void save_dataset(const Dataset& ds, const std::string& path_base) {
    std::vector<unsigned char> blob;
    json tensors = json::array();
    auto put = [&](const std::string& name, const Tensor& t) {
        tensors.push_back(json{{"name", name}, {"shape", t.shape()}});
        detail::append_f64_le(blob, t.data(), t.size());
    };
    put("train_branch", ds.train_branch);
    put("test_branch", ds.test_branch);
    for (std::size_t f = 0; f < ds.test_refs.size(); ++f)
        put("test_refs_" + std::to_string(f), ds.test_refs[f]);
    if (ds.test_alpha) put("test_alpha", *ds.test_alpha);
    if (ds.train_g) put("train_g", *ds.train_g);
    if (ds.test_g) put("test_g", *ds.test_g);
    for (std::size_t a = 0; a < ds.eval_axes.size(); ++a)
        put("eval_axis_" + std::to_string(a), ds.eval_axes[a]);

    json manifest{{"format", "sepdon-dataset"},
                  {"version", 1},
                  {"problem", problem_name(ds.kind)},
                  {"seed", ds.seed},
                  {"n_fields", ds.test_refs.size()},
                  {"n_eval_axes", ds.eval_axes.size()},
                  {"tensors", tensors},
                  {"total_bytes", blob.size()},
                  {"checksum_fnv1a64", hex64(fnv1a64(blob.data(), blob.size()))}};
    detail::write_file(path_base + ".bin", blob.data(), blob.size());
    std::string text = manifest.dump(2);
    detail::write_file(path_base + ".json", text.data(), text.size());
}

Dataset load_dataset(const std::string& path_base) {
    json manifest;
    try {
        manifest = json::parse(detail::read_text_file(path_base + ".json"));
    } catch (const json::parse_error& e) {
        throw format_error("dataset manifest is not valid json: " + std::string(e.what()));
    }
    if (manifest.value("format", "") != "sepdon-dataset")
        throw format_error("not a dataset manifest: " + path_base + ".json");
    if (manifest.value("version", 0) != 1) throw format_error("unsupported dataset version");

    std::vector<unsigned char> blob = detail::read_file(path_base + ".bin");
    const std::size_t expect = manifest.at("total_bytes").get<std::size_t>();
    if (blob.size() < expect) throw corruption_error("dataset blob is truncated");
    if (blob.size() != expect) throw format_error("dataset blob larger than manifest records");

    std::size_t declared = 0;
    for (const auto& tj : manifest.at("tensors")) {
        std::size_t n = 1;
        for (std::size_t s : tj.at("shape").get<std::vector<std::size_t>>()) n *= s;
        declared += 8 * n;
    }
    if (declared != expect)
        throw format_error("dataset manifest tensor shapes disagree with the blob length");
    if (hex64(fnv1a64(blob.data(), blob.size())) != manifest.at("checksum_fnv1a64").get<std::string>())
        throw corruption_error("dataset blob checksum mismatch");

    Dataset ds;
    ds.kind = problem_from_name(manifest.at("problem").get<std::string>());
    ds.seed = manifest.at("seed").get<std::uint64_t>();
    std::size_t offset = 0;
    auto take = [&](const json& tj) {
        auto shape = tj.at("shape").get<std::vector<std::size_t>>();
        Tensor t(shape);
        detail::read_f64_le(blob.data() + offset, t.data(), t.size());
        offset += 8 * t.size();
        return t;
    };
    for (const auto& tj : manifest.at("tensors")) {
        const std::string name = tj.at("name").get<std::string>();
        Tensor t = take(tj);
        if (name == "train_branch") ds.train_branch = std::move(t);
        else if (name == "test_branch") ds.test_branch = std::move(t);
        else if (name.starts_with("test_refs_")) ds.test_refs.push_back(std::move(t));
        else if (name == "test_alpha") ds.test_alpha = std::move(t);
        else if (name == "train_g") ds.train_g = std::move(t);
        else if (name == "test_g") ds.test_g = std::move(t);
        else if (name.starts_with("eval_axis_")) ds.eval_axes.push_back(std::move(t));
        else throw format_error("dataset manifest names unknown tensor '" + name + "'");
    }
    return ds;
}

} // namespace sepdon
