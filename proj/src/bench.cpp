#include "sepdon/bench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "sepdon/errors.hpp"
#include "sepdon/mathutil.hpp"

namespace sepdon {

namespace {

std::size_t prod(const std::vector<std::size_t>& v) {
    std::size_t p = 1;
    for (std::size_t x : v) p *= x;
    return p;
}

std::size_t sum(const std::vector<std::size_t>& v) {
    std::size_t s = 0;
    for (std::size_t x : v) s += x;
    return s;
}

} // namespace

PassCounts count_passes(const ProblemSpec& problem, Variant variant, std::size_t n_train) {
    PassCounts out;
    // (separable trunk passes, vanilla constraint sites) per term
    std::vector<std::pair<std::size_t, std::size_t>> terms;
    switch (problem.kind) {
        case ProblemKind::burgers:
            terms.emplace_back(sum(problem.residual_axes), prod(problem.residual_axes));
            terms.emplace_back(problem.bc_nt + 2, problem.bc_nt);
            terms.emplace_back(problem.ic_nx + 1, problem.ic_nx);
            break;
        case ProblemKind::biot:
            terms.emplace_back(sum(problem.residual_axes), prod(problem.residual_axes));
            terms.emplace_back(problem.biot_n + 2, problem.biot_n);
            terms.emplace_back(problem.biot_n + 1, problem.biot_n);
            break;
        case ProblemKind::heat: {
            terms.emplace_back(sum(problem.residual_axes), prod(problem.residual_axes));
            const std::size_t ic_sites = problem.heat_ic_n * problem.heat_ic_n * problem.heat_c_n;
            terms.emplace_back(2 * problem.heat_ic_n + 1 + problem.heat_c_n, ic_sites);
            const std::size_t edge_sites = problem.heat_bc_n * problem.heat_bc_n * problem.heat_c_n;
            const std::size_t edge_axes = 1 + 2 * problem.heat_bc_n + problem.heat_c_n;
            for (int e = 0; e < 4; ++e) terms.emplace_back(edge_axes, edge_sites);
            break;
        }
    }
    if (variant == Variant::separable) {
        out.branch_passes = n_train;
        for (auto [sep, van] : terms) {
            (void)van;
            out.trunk_passes_by_term.push_back(sep);
            out.trunk_total += sep;
        }
        out.total = out.branch_passes + out.trunk_total;
    } else {
        for (auto [sep, van] : terms) {
            (void)sep;
            out.trunk_passes_by_term.push_back(n_train * van);
            out.trunk_total += n_train * van;
        }
        out.branch_passes = out.trunk_total; // one branch pass per pair
        out.total = out.trunk_total;         // per-network pass count
    }
    return out;
}

std::pair<std::size_t, std::size_t> jacobian_dims(const std::vector<std::size_t>& axes,
                                                  Variant variant) {
    const std::size_t lattice = prod(axes);
    if (variant == Variant::separable) return {sum(axes), lattice};
    return {lattice, lattice};
}

double measure_ms_per_iter(const ProblemSpec& problem, const DeepONetModel& model,
                           const Dataset& dataset, const TrainConfig& config, std::size_t warmup,
                           std::size_t iters) {
    TrainConfig c = config;
    c.epochs = warmup + iters; // vanilla epochs may span several steps; cap below
    c.max_steps = warmup + iters;
    c.eval_every = 0;
    c.checkpoint_every = 0;
    c.out_dir.clear();
    DeepONetModel copy = model;
    TrainResult res = train(problem, std::move(copy), dataset, c);
    std::vector<double> ms;
    for (std::size_t i = warmup; i < res.report.history.size(); ++i)
        ms.push_back(res.report.history[i].ms);
    if (ms.empty()) throw std::invalid_argument("measure_ms_per_iter: no timed steps");
    std::sort(ms.begin(), ms.end());
    return ms[ms.size() / 2];
}

std::vector<SweepRow> scaling_sweep(const SweepConfig& config) {
    std::vector<SweepRow> rows;
    for (std::size_t n : config.n_list) {
        ProblemSpec p = burgers_problem();
        p.sensors = config.sensors;
        p.residual_axes = {n, n};
        p.residual_random = false;
        p.bc_nt = 8;
        p.ic_nx = config.sensors;
        p.weight_ic = 1.0;
        p.eval_axes = {5, 5};

        // synthetic dataset: timing only, no oracle references needed
        Dataset ds;
        ds.kind = ProblemKind::burgers;
        ds.seed = config.seed;
        Rng rng(config.seed);
        ds.train_branch = Tensor({config.n_train, p.sensors});
        for (std::size_t e = 0; e < ds.train_branch.size(); ++e)
            ds.train_branch[e] = rng.next_uniform(-0.1, 0.1);
        ds.test_branch = Tensor::full({1, p.sensors}, 0.0);
        ds.test_refs.push_back(Tensor::full({1, 25}, 1.0));
        ds.eval_axes = {Tensor({5}, {0, 0.25, 0.5, 0.75, 1.0}),
                        Tensor({5}, {0, 0.25, 0.5, 0.75, 1.0})};

        for (Variant variant : config.variants) {
            DeepONetConfig mc;
            mc.variant = variant;
            mc.d = 2;
            mc.p = config.p;
            mc.r = variant == Variant::separable ? config.r : 1;
            mc.fields = 1;
            mc.sensors = p.sensors;
            mc.branch_hidden = config.hidden;
            mc.trunk_hidden = config.hidden;
            DeepONetModel model = init_params(mc, config.seed + n);

            TrainConfig tc;
            tc.seed = config.seed;
            tc.pair_batch = 1u << 30; // one full-plan step per iteration
            tc.pair_chunk = 4096;
            const double ms = measure_ms_per_iter(p, model, ds, tc, config.warmup, config.iters);

            SweepRow row;
            row.n = n;
            row.variant = variant == Variant::separable ? "separable" : "vanilla";
            row.ms_per_iter = ms;
            row.passes = count_passes(p, variant, config.n_train).total;
            auto [jr, jc] = jacobian_dims(p.residual_axes, variant);
            row.jacobian_rows = jr;
            row.jacobian_cols = jc;
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

void write_sweep_csv(const std::string& path, std::span<const SweepRow> rows) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw io_error("cannot open sweep csv: " + path);
    f << "n,variant,ms_per_iter,passes,jacobian_rows,jacobian_cols\n";
    f.precision(10);
    for (const SweepRow& r : rows)
        f << r.n << ',' << r.variant << ',' << r.ms_per_iter << ',' << r.passes << ','
          << r.jacobian_rows << ',' << r.jacobian_cols << '\n';
}

double growth_exponent(std::span<const SweepRow> rows, const std::string& variant) {
    std::vector<double> lx, ly;
    for (const SweepRow& r : rows)
        if (r.variant == variant) {
            lx.push_back(std::log(static_cast<double>(r.n)));
            ly.push_back(std::log(r.ms_per_iter));
        }
    if (lx.size() < 2) throw std::invalid_argument("growth_exponent: need at least two points");
    return ls_slope(lx.data(), ly.data(), lx.size());
}

} // namespace sepdon
