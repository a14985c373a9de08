// Command-line front end: dataset generation, training, evaluation and the
// cost/scaling benchmarks, all driven by TOML or JSON config files.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "sepdon/bench.hpp"
#include "sepdon/config.hpp"
#include "sepdon/data.hpp"
#include "sepdon/errors.hpp"
#include "sepdon/model.hpp"
#include "sepdon/parallel.hpp"
#include "sepdon/train.hpp"

namespace {

using nlohmann::json;
using namespace sepdon;

struct CommonArgs {
    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string out;
    bool deterministic = false;
    int threads = 0;
};

RunConfig resolve(const CommonArgs& args) {
    RunConfig rc = load_run_config(args.config_path);
    if (args.seed_set) {
        rc.seed = args.seed;
        rc.train.seed = args.seed;
        rc.bench.sweep.seed = args.seed;
    }
    if (!args.out.empty()) rc.out_dir = args.out;
    if (args.deterministic) rc.deterministic = true;
    if (args.threads > 0) rc.threads = args.threads;
    set_max_threads(rc.deterministic ? 1 : rc.threads);
    return rc;
}

std::string iso_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

void write_json(const std::string& path, const json& j) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw io_error("cannot write " + path);
    f << j.dump(2) << '\n';
}

int cmd_gen_data(const CommonArgs& args) {
    RunConfig rc = resolve(args);
    if (rc.dataset_path.empty()) throw usage_error("config: missing required field 'dataset.path'");
    Dataset ds = make_dataset(rc.problem, rc.n_train, rc.n_test, rc.seed);
    std::filesystem::path base(rc.dataset_path);
    if (base.has_parent_path()) std::filesystem::create_directories(base.parent_path());
    save_dataset(ds, rc.dataset_path);
    json manifest = json::parse(std::ifstream(rc.dataset_path + ".json"));
    std::printf("dataset %s: problem=%s train=%zu test=%zu checksum=%s\n", rc.dataset_path.c_str(),
                problem_name(ds.kind).c_str(), ds.n_train(), ds.n_test(),
                manifest.at("checksum_fnv1a64").get<std::string>().c_str());
    return 0;
}

int cmd_train(const CommonArgs& args) {
    RunConfig rc = resolve(args);
    if (rc.dataset_path.empty()) throw usage_error("config: missing required field 'dataset.path'");
    Dataset ds = load_dataset(rc.dataset_path);
    std::filesystem::create_directories(rc.out_dir);

    DeepONetModel model = init_params(rc.model, rc.seed);
    TrainConfig tc = rc.train;
    tc.out_dir = rc.out_dir;
    const std::size_t params = count_params(rc.model);
    std::printf("training %s/%s: %zu parameters, %zu epochs\n", problem_name(rc.problem.kind).c_str(),
                rc.model.variant == Variant::separable ? "separable" : "vanilla", params, tc.epochs);

    TrainResult res = train(rc.problem, std::move(model), ds, tc);
    EvalReport final_eval = evaluate(res.model, rc.problem, ds);

    json summary{{"problem", problem_name(rc.problem.kind)},
                 {"variant", rc.model.variant == Variant::separable ? "separable" : "vanilla"},
                 {"param_count", params},
                 {"epochs", tc.epochs},
                 {"seed", rc.seed},
                 {"final_rel_l2", final_eval.aggregate_rel_l2},
                 {"mean_rel_l2", final_eval.mean_rel_l2},
                 {"wall_seconds", res.report.wall_seconds},
                 {"branch_passes_per_step", res.report.branch_passes_per_step},
                 {"trunk_passes_per_step", res.report.trunk_passes_per_step},
                 {"finished_at", iso_now()}};
    write_json(rc.out_dir + "/run_summary.json", summary);
    std::printf("final rel_l2=%.6g mean=%.6g wall=%.1fs -> %s\n", final_eval.aggregate_rel_l2,
                final_eval.mean_rel_l2, res.report.wall_seconds, (rc.out_dir + "/run_summary.json").c_str());
    return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& checkpoint) {
    RunConfig rc = resolve(args);
    if (rc.dataset_path.empty()) throw usage_error("config: missing required field 'dataset.path'");
    Dataset ds = load_dataset(rc.dataset_path);
    Checkpoint ck = load_checkpoint(checkpoint);
    EvalReport rep = evaluate(ck.model, rc.problem, ds);
    std::filesystem::create_directories(rc.out_dir);
    json summary{{"problem", problem_name(rc.problem.kind)},
                 {"checkpoint", checkpoint},
                 {"final_rel_l2", rep.aggregate_rel_l2},
                 {"mean_rel_l2", rep.mean_rel_l2},
                 {"n_test", ds.n_test()},
                 {"finished_at", iso_now()}};
    write_json(rc.out_dir + "/eval_summary.json", summary);
    std::printf("rel_l2=%.6g mean=%.6g over %zu test functions\n", rep.aggregate_rel_l2,
                rep.mean_rel_l2, ds.n_test());
    return 0;
}

int cmd_bench(const CommonArgs& args) {
    RunConfig rc = resolve(args);
    std::filesystem::create_directories(rc.out_dir);
    if (rc.bench.mode == BenchMode::passes) {
        PassCounts sep = count_passes(rc.problem, Variant::separable, rc.bench.n_train);
        PassCounts van = count_passes(rc.problem, Variant::vanilla, rc.bench.n_train);
        std::printf("separable: branch=%zu trunk=", sep.branch_passes);
        for (std::size_t i = 0; i < sep.trunk_passes_by_term.size(); ++i)
            std::printf("%s%zu", i ? "/" : "", sep.trunk_passes_by_term[i]);
        std::printf(" total=%zu\n", sep.total);
        std::printf("vanilla:   per-network passes=%zu\n", van.total);
        const double exact = static_cast<double>(van.total) / static_cast<double>(sep.total);
        std::printf("pass ratio: %.1f (exact denominator %zu)\n", exact, sep.total);
        auto [sr, sc_] = jacobian_dims(rc.problem.residual_axes, Variant::separable);
        auto [vr, vc] = jacobian_dims(rc.problem.residual_axes, Variant::vanilla);
        std::printf("jacobian: separable [%zu x %zu], vanilla [%zu x %zu]\n", sr, sc_, vr, vc);
        return 0;
    }
    if (rc.bench.mode == BenchMode::sweep) {
        auto rows = scaling_sweep(rc.bench.sweep);
        const std::string csv = rc.out_dir + "/sweep.csv";
        write_sweep_csv(csv, rows);
        for (const std::string variant : {"separable", "vanilla"}) {
            bool have = false;
            for (const auto& r : rows)
                if (r.variant == variant) have = true;
            if (have)
                std::printf("%s growth exponent: %.3f\n", variant.c_str(),
                            growth_exponent(rows, variant));
        }
        std::printf("rows=%zu -> %s\n", rows.size(), csv.c_str());
        return 0;
    }
    // paper-ratio: per-iteration time of the paper's burgers configurations
    ProblemSpec p = burgers_problem();
    Dataset ds;
    ds.kind = ProblemKind::burgers;
    ds.seed = rc.seed;
    Rng rng(rc.seed);
    ds.train_branch = Tensor({rc.bench.n_train, p.sensors});
    for (std::size_t e = 0; e < ds.train_branch.size(); ++e)
        ds.train_branch[e] = rng.next_uniform(-0.1, 0.1);
    ds.test_branch = Tensor::full({1, p.sensors}, 0.0);
    ds.test_refs.push_back(Tensor::full({1, 4}, 1.0));
    ds.eval_axes = {Tensor({2}, {0.0, 1.0}), Tensor({2}, {0.0, 1.0})};

    DeepONetConfig sep_cfg;
    sep_cfg.variant = Variant::separable;
    sep_cfg.d = 2;
    sep_cfg.p = 50;
    sep_cfg.r = 50;
    sep_cfg.sensors = p.sensors;
    sep_cfg.branch_hidden = std::vector<std::size_t>(6, 100);
    sep_cfg.trunk_hidden = std::vector<std::size_t>(6, 100);
    DeepONetConfig van_cfg = sep_cfg;
    van_cfg.variant = Variant::vanilla;
    van_cfg.p = 100;
    van_cfg.r = 1;

    TrainConfig tc;
    tc.seed = rc.seed;
    tc.pair_batch = 100000;
    tc.pair_chunk = rc.train.pair_chunk;
    const double sep_ms = measure_ms_per_iter(p, init_params(sep_cfg, rc.seed), ds, tc,
                                              rc.bench.ratio_warmup, rc.bench.ratio_iters);
    const double van_ms = measure_ms_per_iter(p, init_params(van_cfg, rc.seed), ds, tc,
                                              rc.bench.ratio_warmup, rc.bench.ratio_iters);
    json out{{"separable_ms_per_iter", sep_ms},
             {"vanilla_ms_per_iter", van_ms},
             {"ratio", van_ms / sep_ms},
             {"finished_at", iso_now()}};
    write_json(rc.out_dir + "/paper_ratio.json", out);
    std::printf("separable %.2f ms/iter, vanilla %.2f ms/iter, ratio %.1fx\n", sep_ms, van_ms,
                van_ms / sep_ms);
    return 0;
}

void add_common(CLI::App* sub, CommonArgs& args) {
    sub->add_option("--config", args.config_path, "TOML or JSON run configuration")->required();
    sub->add_option("--seed", args.seed, "override the run seed")->each([&](const std::string&) {
        args.seed_set = true;
    });
    sub->add_option("--out", args.out, "override the output directory");
    sub->add_flag("--deterministic", args.deterministic, "single-threaded, serial reductions");
    sub->add_option("--threads", args.threads, "compute thread cap (0 = hardware)");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"separable physics-informed deep operator networks"};
    app.require_subcommand(1);
    CommonArgs args;
    std::string checkpoint;

    CLI::App* gen = app.add_subcommand("gen-data", "sample input functions and reference solutions");
    add_common(gen, args);
    CLI::App* tr = app.add_subcommand("train", "train a model against a dataset");
    add_common(tr, args);
    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint against a dataset");
    add_common(ev, args);
    ev->add_option("--checkpoint", checkpoint, "checkpoint path base (no extension)")->required();
    CLI::App* be = app.add_subcommand("bench", "pass counting and timing sweeps");
    add_common(be, args);

    try {
        app.parse(argc, argv);
        if (gen->parsed()) return cmd_gen_data(args);
        if (tr->parsed()) return cmd_train(args);
        if (ev->parsed()) return cmd_eval(args, checkpoint);
        if (be->parsed()) return cmd_bench(args);
        return 2;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const usage_error& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 2;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 2;
    } catch (const numeric_error& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 3;
    } catch (const io_error& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
