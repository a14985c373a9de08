#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "sepdon/data.hpp"
#include "sepdon/errors.hpp"
#include "sepdon/model.hpp"
#include "sepdon/oracles.hpp"
#include "sepdon/train.hpp"
#include "support.hpp"

using namespace sepdon;
using testsupport::random_tensor;

namespace {

DeepONetConfig tiny_burgers_config(Variant variant) {
    DeepONetConfig c;
    c.variant = variant;
    c.d = 2;
    c.p = 4;
    c.r = variant == Variant::separable ? 4 : 1;
    c.fields = 1;
    c.sensors = 7;
    c.branch_hidden = {10};
    c.trunk_hidden = {10};
    return c;
}

ProblemSpec tiny_burgers() {
    ProblemSpec p = burgers_problem();
    p.residual_axes = {6, 6};
    p.bc_nt = 5;
    p.ic_nx = 7;
    p.sensors = 7;
    p.eval_axes = {9, 9};
    return p;
}

Dataset tiny_dataset(const ProblemSpec& p) { return make_dataset(p, 6, 2, 3); }

} // namespace

TEST_CASE("lr staircase") {
    TrainConfig c;
    c.lr0 = 1e-3;
    c.decay_rate = 0.95;
    c.decay_every = 1000;
    CHECK(lr_at(c, 0) == 1e-3);
    CHECK(lr_at(c, 999) == 1e-3);
    CHECK(lr_at(c, 1000) == doctest::Approx(9.5e-4));
    CHECK(lr_at(c, 2500) == doctest::Approx(1e-3 * 0.95 * 0.95));
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    std::vector<Tensor> params{Tensor({3}, {1.0, -2.0, 0.5})};
    std::vector<Tensor> zero{Tensor::zeros({3})};
    AdamState st = AdamState::like(params);
    adam_step(params, zero, st, 1e-3);
    CHECK(params[0][0] == 1.0);
    CHECK(params[0][1] == -2.0);
    CHECK(params[0][2] == 0.5);
}

TEST_CASE("adam first step approximates a signed step of size lr") {
    std::vector<Tensor> params{Tensor({2}, {0.0, 0.0})};
    std::vector<Tensor> grad{Tensor({2}, {3.0, -0.25})};
    AdamState st = AdamState::like(params);
    adam_step(params, grad, st, 1e-2);
    CHECK(params[0][0] == doctest::Approx(-1e-2).epsilon(1e-6));
    CHECK(params[0][1] == doctest::Approx(1e-2).epsilon(1e-6));
}

TEST_CASE("adam rejects non-finite gradients") {
    std::vector<Tensor> params{Tensor({1}, {0.0})};
    std::vector<Tensor> grad{Tensor({1}, {std::numeric_limits<double>::quiet_NaN()})};
    AdamState st = AdamState::like(params);
    CHECK_THROWS_AS(adam_step(params, grad, st, 1e-3), numeric_error);
}

TEST_CASE("epochs=0 leaves the model untouched with empty history") {
    ProblemSpec p = tiny_burgers();
    Dataset ds = tiny_dataset(p);
    DeepONetModel model = init_params(tiny_burgers_config(Variant::separable), 5);
    DeepONetModel before = model;
    TrainConfig cfg;
    cfg.epochs = 0;
    cfg.eval_every = 0;
    auto res = train(p, std::move(model), ds, cfg);
    CHECK(res.report.history.empty());
    for (std::size_t i = 0; i < before.params.size(); ++i)
        for (std::size_t e = 0; e < before.params[i].size(); ++e)
            CHECK(res.model.params[i][e] == before.params[i][e]);
}

TEST_CASE("separable training is deterministic and reduces the loss") {
    ProblemSpec p = tiny_burgers();
    Dataset ds = tiny_dataset(p);
    TrainConfig cfg;
    cfg.epochs = 40;
    cfg.eval_every = 0;
    cfg.seed = 17;

    auto run = [&] {
        DeepONetModel model = init_params(tiny_burgers_config(Variant::separable), 5);
        return train(p, std::move(model), ds, cfg);
    };
    auto a = run();
    auto b = run();
    REQUIRE(a.report.history.size() == 40);
    for (std::size_t i = 0; i < a.model.params.size(); ++i)
        for (std::size_t e = 0; e < a.model.params[i].size(); ++e)
            CHECK(a.model.params[i][e] == b.model.params[i][e]);
    CHECK(a.report.history.back().total < a.report.history.front().total);
    for (const auto& r : a.report.history) CHECK(std::isfinite(r.total));
    // separable trunk pass counting: full factorized plan per step
    CHECK(a.report.branch_passes_per_step == 6);
    CHECK(a.report.trunk_passes_per_step == (6 + 6) + (2 + 5) + (7 + 1));
}

TEST_CASE("vanilla pair-batch training runs and reduces the loss") {
    ProblemSpec p = tiny_burgers();
    Dataset ds = tiny_dataset(p);
    TrainConfig cfg;
    cfg.epochs = 30;
    cfg.eval_every = 0;
    cfg.seed = 21;
    cfg.pair_batch = 2000; // full batch each step at this scale
    cfg.pair_chunk = 128;
    DeepONetModel model = init_params(tiny_burgers_config(Variant::vanilla), 6);
    auto res = train(p, std::move(model), ds, cfg);
    REQUIRE(!res.report.history.empty());
    CHECK(res.report.history.back().total < res.report.history.front().total);
    for (const auto& r : res.report.history) CHECK(std::isfinite(r.total));
}

TEST_CASE("vanilla and separable training records carry comparable losses") {
    // The first full-batch vanilla loss must match the separable formula when
    // the batch covers every pair: both are the same mean-squared assembly.
    ProblemSpec p = tiny_burgers();
    Dataset ds = tiny_dataset(p);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.eval_every = 0;
    cfg.seed = 77;
    cfg.pair_batch = 1 << 20;

    DeepONetModel vmodel = init_params(tiny_burgers_config(Variant::vanilla), 8);
    DeepONetModel vcopy = vmodel;
    auto vres = train(p, std::move(vmodel), ds, cfg);

    // plain losses on the same axes (the run seed fixes them)
    Rng rng(cfg.seed);
    Rng axes_rng = rng.split("train/axes");
    ProblemAxes axes = ProblemAxes::build(p, axes_rng);
    ModelField field(vcopy, ds.train_branch);
    LossBreakdown lb = burgers_losses(field, ds.train_branch, p, axes);
    CHECK(vres.report.history[0].total == doctest::Approx(lb.total).epsilon(1e-10));
    CHECK(vres.report.history[0].physics == doctest::Approx(lb.physics).epsilon(1e-10));
    CHECK(vres.report.history[0].ic == doctest::Approx(lb.ic).epsilon(1e-10));
    CHECK(vres.report.history[0].bc == doctest::Approx(lb.bc).epsilon(1e-10));
}

TEST_CASE("evaluate: oracle passthrough scores zero, zero model scores one") {
    ProblemSpec p = tiny_burgers();
    Dataset ds = tiny_dataset(p);
    DeepONetModel zero = init_params(tiny_burgers_config(Variant::separable), 5);
    for (Tensor& t : zero.params)
        for (std::size_t e = 0; e < t.size(); ++e) t[e] = 0.0;
    EvalReport rep = evaluate(zero, p, ds);
    CHECK(rep.aggregate_rel_l2 == doctest::Approx(1.0));
    for (double v : rep.per_sample_rel_l2) CHECK(v == doctest::Approx(1.0));

    // predictions identical to the references score exactly zero: splice a
    // random model's own outputs in as the references
    DeepONetModel model = init_params(tiny_burgers_config(Variant::separable), 9);
    Dataset self = ds;
    const std::size_t m = ds.test_refs[0].dim(1);
    Tensor run_pred({ds.n_test(), m});
    auto out = deeponet_eval(model, ds.test_branch, ds.eval_axes);
    for (std::size_t s = 0; s < ds.n_test(); ++s)
        for (std::size_t e = 0; e < m; ++e) run_pred.at2(s, e) = out.fields[0][s * m + e];
    self.test_refs[0] = run_pred; // references == what the model predicts
    EvalReport perfect = evaluate(model, p, self);
    CHECK(perfect.aggregate_rel_l2 == doctest::Approx(0.0));

    // per-sample values agree with relative_l2 applied to each row
    EvalReport rep2 = evaluate(model, p, ds);
    for (std::size_t s = 0; s < ds.n_test(); ++s) {
        Tensor prow({m}), rrow({m});
        for (std::size_t e = 0; e < m; ++e) {
            prow[e] = out.fields[0][s * m + e];
            rrow[e] = ds.test_refs[0].at2(s, e);
        }
        CHECK(rep2.per_sample_rel_l2[s] == doctest::Approx(relative_l2(prow, rrow)).epsilon(1e-12));
    }
}

TEST_CASE("metrics stream and checkpoints land in the out dir") {
    ProblemSpec p = tiny_burgers();
    Dataset ds = tiny_dataset(p);
    auto dir = std::filesystem::temp_directory_path() / "sepdon_train_test";
    std::filesystem::create_directories(dir);
    TrainConfig cfg;
    cfg.epochs = 4;
    cfg.eval_every = 2;
    cfg.checkpoint_every = 2;
    cfg.out_dir = dir.string();
    DeepONetModel model = init_params(tiny_burgers_config(Variant::separable), 5);
    auto res = train(p, std::move(model), ds, cfg);
    CHECK(std::filesystem::exists(dir / "metrics.csv"));
    CHECK(std::filesystem::exists(dir / "checkpoint_2.json"));
    CHECK(std::filesystem::exists(dir / "model_final.bin"));
    // header + 4 rows
    std::ifstream f(dir / "metrics.csv");
    std::string line;
    std::getline(f, line);
    CHECK(line == "step,lr,loss_total,loss_physics,loss_ic,loss_bc,test_rel_l2,ms_per_iter");
    int rows = 0;
    while (std::getline(f, line)) ++rows;
    CHECK(rows == 4);
    // the checkpoint round-trips into the same parameters
    Checkpoint ck = load_checkpoint((dir / "model_final").string());
    for (std::size_t i = 0; i < res.model.params.size(); ++i)
        for (std::size_t e = 0; e < res.model.params[i].size(); ++e)
            CHECK(ck.model.params[i][e] == res.model.params[i][e]);
    std::filesystem::remove_all(dir);
}

TEST_CASE("gradient recomputation matches the step's recorded loss path") {
    // recompute the gradient of the recorded loss on a fresh tape; adam must
    // have consumed exactly that gradient (same seed, same axes)
    ProblemSpec p = tiny_burgers();
    Dataset ds = tiny_dataset(p);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.eval_every = 0;
    cfg.seed = 99;
    DeepONetModel model = init_params(tiny_burgers_config(Variant::separable), 5);
    DeepONetModel before = model;
    auto res = train(p, std::move(model), ds, cfg);

    Rng rng(cfg.seed);
    Rng axes_rng = rng.split("train/axes");
    ProblemAxes axes = ProblemAxes::build(p, axes_rng);
    auto build = [&](Tape& tape, std::span<const Tape::Id> ids) {
        ModelOnTape mt = ModelOnTape::from_ids(tape, before.config, ids, ds.train_branch);
        return build_burgers_loss(tape, mt, ds.train_branch, p, axes).total;
    };
    double loss = 0.0;
    auto grads = grad_params_through_jvp2(build, before.params, &loss);
    CHECK(loss == doctest::Approx(res.report.history[0].total).epsilon(1e-12));

    // replaying adam with that gradient reproduces the trained parameters
    AdamState st = AdamState::like(before.params);
    adam_step(before.params, grads, st, lr_at(cfg, 0));
    for (std::size_t i = 0; i < before.params.size(); ++i)
        for (std::size_t e = 0; e < before.params[i].size(); ++e)
            CHECK(before.params[i][e] == res.model.params[i][e]);
}
