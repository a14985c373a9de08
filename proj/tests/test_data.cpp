#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "sepdon/data.hpp"
#include "sepdon/errors.hpp"
#include "sepdon/oracles.hpp"
#include "sepdon/tensor.hpp"
#include "support.hpp"

using namespace sepdon;

TEST_CASE("spectral gp: periodicity, determinism, moments") {
    GpSpectralSpec spec;
    const std::size_t count = 10000, n = 101;
    Tensor u = sample_gp_periodic_spectral(spec, n, count, 7);

    double worst_gap = 0.0;
    for (std::size_t s = 0; s < count; ++s)
        worst_gap = std::max(worst_gap, std::fabs(u.at2(s, 0) - u.at2(s, n - 1)));
    CHECK(worst_gap <= 1e-8);

    Tensor u2 = sample_gp_periodic_spectral(spec, n, count, 7);
    bool identical = true;
    for (std::size_t i = 0; i < 50; ++i)
        if (u[i] != u2[i]) identical = false;
    CHECK(identical);

    // pointwise mean within 3 standard errors, variance within 5% of sum_k S(k)
    const double want_var = gp_spectral_variance(spec);
    for (std::size_t i : {std::size_t(0), std::size_t(25), std::size_t(50), std::size_t(75)}) {
        double mean = 0.0, var = 0.0;
        for (std::size_t s = 0; s < count; ++s) mean += u.at2(s, i);
        mean /= count;
        for (std::size_t s = 0; s < count; ++s) {
            const double d = u.at2(s, i) - mean;
            var += d * d;
        }
        var /= count - 1;
        CHECK(std::fabs(mean) <= 3.0 * std::sqrt(var) / 100.0);
        CHECK(std::fabs(var - want_var) <= 0.05 * want_var);
    }
}

TEST_CASE("rbf gp: variance, long-range decorrelation, determinism") {
    GpRbfSpec spec;
    const std::size_t count = 10000, n = 101;
    Tensor u = sample_gp_rbf(spec, n, count, 11);

    for (std::size_t i : {std::size_t(0), std::size_t(50), std::size_t(100)}) {
        double mean = 0.0, var = 0.0;
        for (std::size_t s = 0; s < count; ++s) mean += u.at2(s, i);
        mean /= count;
        for (std::size_t s = 0; s < count; ++s) {
            const double d = u.at2(s, i) - mean;
            var += d * d;
        }
        var /= count - 1;
        CHECK(std::fabs(var - spec.amplitude) <= 0.10 * spec.amplitude);
    }

    // u(0) and u(1) are essentially uncorrelated: K(0,1)/K(0,0) = exp(-10)
    double c01 = 0.0, v0 = 0.0, v1 = 0.0, m0 = 0.0, m1 = 0.0;
    for (std::size_t s = 0; s < count; ++s) {
        m0 += u.at2(s, 0);
        m1 += u.at2(s, n - 1);
    }
    m0 /= count;
    m1 /= count;
    for (std::size_t s = 0; s < count; ++s) {
        const double a = u.at2(s, 0) - m0, b = u.at2(s, n - 1) - m1;
        c01 += a * b;
        v0 += a * a;
        v1 += b * b;
    }
    const double corr = c01 / std::sqrt(v0 * v1);
    CHECK(std::fabs(corr) <= 0.05); // exp(-10) ~ 4.5e-5 plus sampling noise

    Tensor u2 = sample_gp_rbf(spec, n, 3, 11);
    for (std::size_t i = 0; i < 3 * n; ++i) CHECK(u[i] == u2[i]);
}

TEST_CASE("axes plans per problem") {
    Rng rng(1);
    ProblemSpec bs = burgers_problem();
    auto res = build_axes(bs, AxisRole::residual, rng);
    REQUIRE(res.size() == 2);
    CHECK(res[0].size() == 50);
    CHECK(res[1].size() == 50);
    for (std::size_t i = 0; i < 50; ++i) {
        CHECK(res[0][i] >= 0.0);
        CHECK(res[0][i] <= 1.0);
    }
    // residual axes are drawn once per run seed: same rng state -> same axes
    Rng rng_b(1);
    auto res_b = build_axes(bs, AxisRole::residual, rng_b);
    CHECK(res[0][7] == res_b[0][7]);

    auto bc = build_axes(bs, AxisRole::bc, rng);
    CHECK(bc[0].size() == 2);
    CHECK(bc[1].size() == 100);
    auto ic = build_axes(bs, AxisRole::ic, rng);
    CHECK(ic[0].size() == 101);
    CHECK(ic[1].size() == 1);

    ProblemSpec hs = heat_problem();
    auto hres = build_axes(hs, AxisRole::residual, rng);
    REQUIRE(hres.size() == 4);
    for (const auto& ax : hres) CHECK(ax.size() == 31);
    // c axis covers sqrt of the diffusivity range
    CHECK(hres[3][0] == doctest::Approx(0.1));
    CHECK(hres[3][30] == doctest::Approx(1.0));
    auto hbc = build_axes_sets(hs, AxisRole::bc, rng);
    CHECK(hbc.size() == 4);
    for (const auto& set : hbc) REQUIRE(set.size() == 4);
    CHECK(hbc[0][0].size() == 1);
    CHECK(hbc[2][1].size() == 1);
    CHECK_THROWS_AS(build_axes(hs, AxisRole::bc, rng), usage_error);

    ProblemSpec is = biot_problem();
    auto ibc = build_axes(is, AxisRole::bc, rng);
    CHECK(ibc[0].size() == 2);
    CHECK(ibc[1].size() == 101);
}

TEST_CASE("dataset round-trip and corruption handling") {
    ProblemSpec p = burgers_problem();
    p.eval_axes = {21, 21}; // keep the oracle fast
    Dataset ds = make_dataset(p, 4, 2, 99);
    CHECK(ds.n_train() == 4);
    CHECK(ds.n_test() == 2);
    REQUIRE(ds.test_refs.size() == 1);
    CHECK(ds.test_refs[0].shape() == std::vector<std::size_t>{2, 441});

    auto dir = std::filesystem::temp_directory_path() / "sepdon_ds_test";
    std::filesystem::create_directories(dir);
    std::string base = (dir / "burgers").string();
    save_dataset(ds, base);
    Dataset back = load_dataset(base);
    CHECK(back.kind == ds.kind);
    CHECK(back.seed == ds.seed);
    for (std::size_t i = 0; i < ds.train_branch.size(); ++i)
        CHECK(back.train_branch[i] == ds.train_branch[i]);
    for (std::size_t i = 0; i < ds.test_refs[0].size(); ++i)
        CHECK(back.test_refs[0][i] == ds.test_refs[0][i]);

    // identical seeds give identical files (checksum over the blob)
    std::string base2 = (dir / "burgers2").string();
    save_dataset(make_dataset(p, 4, 2, 99), base2);
    auto blob1 = std::filesystem::file_size(base + ".bin");
    auto blob2 = std::filesystem::file_size(base2 + ".bin");
    CHECK(blob1 == blob2);

    // truncated blob -> corruption error
    std::filesystem::resize_file(base + ".bin", blob1 - 8);
    CHECK_THROWS_AS(load_dataset(base), corruption_error);

    // manifest shape disagreeing with blob length -> format error
    {
        std::string text;
        {
            std::ifstream in(base2 + ".json");
            text.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
        }
        auto pos = text.find("\"shape\": [");
        REQUIRE(pos != std::string::npos);
        text.replace(pos, 10, "\"shape\": [9,");
        std::ofstream out(base2 + ".json");
        out << text;
    }
    CHECK_THROWS_AS(load_dataset(base2), format_error);
    std::filesystem::remove_all(dir);
}

TEST_CASE("biot dataset carries boundary traces") {
    ProblemSpec p = biot_problem();
    p.eval_axes = {21, 21};
    p.biot_n = 31;
    Dataset ds = make_dataset(p, 2, 1, 5);
    REQUIRE(ds.train_g.has_value());
    REQUIRE(ds.test_g.has_value());
    CHECK(ds.train_g->shape() == std::vector<std::size_t>{2, 31});
    REQUIRE(ds.test_refs.size() == 2);
    // the trace is u(0, t) tabulated on the boundary time grid t_j = (j+1)/n
    Tensor f({31});
    for (std::size_t i = 0; i < 31; ++i) f[i] = ds.train_branch.at2(0, i * 101 / 31);
    Tensor full_f({101});
    for (std::size_t i = 0; i < 101; ++i) full_f[i] = ds.train_branch.at2(0, i);
    Tensor z0({1}, {0.0});
    Tensor tgrid({31});
    for (std::size_t j = 0; j < 31; ++j) tgrid[j] = static_cast<double>(j + 1) / 31.0;
    auto sol = biot_solve_sampled(full_f, z0, tgrid);
    for (std::size_t j = 0; j < 31; ++j)
        CHECK(ds.train_g->at2(0, j) == doctest::Approx(sol.u.at2(0, j)).epsilon(1e-12));
}
