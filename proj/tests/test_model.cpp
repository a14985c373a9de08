#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "sepdon/errors.hpp"
#include "sepdon/model.hpp"
#include "sepdon/rng.hpp"
#include "sepdon/tensor.hpp"
#include "support.hpp"

using namespace sepdon;
using testsupport::random_tensor;

namespace {

DeepONetConfig burgers_vanilla() {
    DeepONetConfig c;
    c.variant = Variant::vanilla;
    c.d = 2;
    c.p = 100;
    c.r = 1;
    c.fields = 1;
    c.sensors = 101;
    c.branch_hidden = std::vector<std::size_t>(6, 100);
    c.trunk_hidden = std::vector<std::size_t>(6, 100);
    return c;
}

DeepONetConfig burgers_separable(std::size_t pr, std::size_t trunk_width) {
    DeepONetConfig c;
    c.variant = Variant::separable;
    c.d = 2;
    c.p = pr;
    c.r = pr;
    c.fields = 1;
    c.sensors = 101;
    c.branch_hidden = std::vector<std::size_t>(6, 100);
    c.trunk_hidden = std::vector<std::size_t>(6, trunk_width);
    return c;
}

DeepONetConfig biot_vanilla() {
    DeepONetConfig c;
    c.variant = Variant::vanilla;
    c.d = 2;
    c.p = 100;
    c.r = 1;
    c.fields = 2;
    c.sensors = 101;
    c.branch_hidden = std::vector<std::size_t>(6, 100);
    c.trunk_hidden = std::vector<std::size_t>(6, 100);
    return c;
}

DeepONetConfig biot_separable(std::size_t pr) {
    DeepONetConfig c;
    c.variant = Variant::separable;
    c.d = 2;
    c.p = pr;
    c.r = pr;
    c.fields = 2;
    c.sensors = 101;
    c.branch_hidden = std::vector<std::size_t>(6, 100);
    c.trunk_hidden = std::vector<std::size_t>(6, 50);
    return c;
}

DeepONetConfig heat_separable() {
    DeepONetConfig c;
    c.variant = Variant::separable;
    c.d = 4;
    c.p = 50;
    c.r = 50;
    c.fields = 1;
    c.sensors = 1;
    c.branch_hidden = std::vector<std::size_t>(6, 50);
    c.trunk_hidden = std::vector<std::size_t>(6, 50);
    return c;
}

DeepONetConfig tiny_separable(std::size_t d, std::size_t fields = 1) {
    DeepONetConfig c;
    c.variant = Variant::separable;
    c.d = d;
    c.p = 3;
    c.r = 2;
    c.fields = fields;
    c.sensors = 5;
    c.branch_hidden = {6, 6};
    c.trunk_hidden = {7};
    return c;
}

} // namespace

TEST_CASE("parameter-count identities") {
    CHECK(count_params(burgers_vanilla()) == 131701);
    CHECK(count_params(burgers_separable(50, 100)) == 672151);
    CHECK(count_params(burgers_separable(20, 100)) == 244921);
    CHECK(count_params(burgers_separable(20, 50)) == 129221);
    CHECK(count_params(biot_vanilla()) == 141802);
    CHECK(count_params(biot_separable(20)) == 170022);
    CHECK(count_params(biot_separable(100)) == 2136502);
    CHECK(count_params(heat_separable()) == 576801);
}

TEST_CASE("count matches actual tensor sizes") {
    for (auto cfg : {burgers_separable(4, 10), biot_vanilla(), tiny_separable(3, 2)}) {
        DeepONetModel m = init_params(cfg, 1);
        std::size_t total = 0;
        for (const Tensor& t : m.params) total += t.size();
        CHECK(total == count_params(cfg));
    }
}

TEST_CASE("init determinism, glorot bound, zero biases") {
    DeepONetConfig cfg = tiny_separable(2);
    cfg.branch_hidden = std::vector<std::size_t>(2, 100);
    cfg.sensors = 100;
    DeepONetModel a = init_params(cfg, 777);
    DeepONetModel b = init_params(cfg, 777);
    REQUIRE(a.params.size() == b.params.size());
    for (std::size_t i = 0; i < a.params.size(); ++i)
        for (std::size_t e = 0; e < a.params[i].size(); ++e) CHECK(a.params[i][e] == b.params[i][e]);

    DeepONetModel c = init_params(cfg, 778);
    bool any_diff = false;
    for (std::size_t e = 0; e < a.params[0].size(); ++e)
        if (a.params[0][e] != c.params[0][e]) any_diff = true;
    CHECK(any_diff);

    // 100 -> 100 weight layer stays inside the glorot bound
    const double bound = std::sqrt(6.0 / 200.0);
    const Tensor& w1 = a.params[2]; // second branch layer: 100 x 100
    REQUIRE(w1.shape() == std::vector<std::size_t>{100, 100});
    for (std::size_t e = 0; e < w1.size(); ++e) {
        CHECK(std::fabs(w1[e]) <= bound);
    }
    // biases exactly zero
    const Tensor& b0 = a.params[1];
    for (std::size_t e = 0; e < b0.size(); ++e) CHECK(b0[e] == 0.0);
    for (std::size_t e = 0; e < a.output_biases().size(); ++e) CHECK(a.output_biases()[e] == 0.0);
}

TEST_CASE("mlp_forward basics and loop oracle") {
    MlpSpec spec{2, {3}, 2};
    std::vector<Tensor> params;
    params.push_back(Tensor::zeros({3, 2}));
    params.push_back(Tensor::zeros({3}));
    params.push_back(Tensor::zeros({2, 3}));
    params.push_back(Tensor({2}, {1.5, -0.5}));
    Tensor x({2, 2}, {0.3, -0.4, 1.0, 2.0});
    Tensor y = mlp_forward(spec, params, x);
    CHECK(y.at2(0, 0) == 1.5);
    CHECK(y.at2(0, 1) == -0.5);
    CHECK(y.at2(1, 0) == 1.5);

    // pure affine map (no hidden layers)
    MlpSpec aff{2, {}, 1};
    std::vector<Tensor> ap;
    ap.push_back(Tensor({1, 2}, {2.0, -1.0}));
    ap.push_back(Tensor({1}, {0.25}));
    Tensor ya = mlp_forward(aff, ap, x);
    CHECK(ya[0] == doctest::Approx(2.0 * 0.3 - 1.0 * -0.4 + 0.25));
    CHECK(ya[1] == doctest::Approx(2.0 * 1.0 - 1.0 * 2.0 + 0.25));

    // random net vs hand-rolled loops
    Rng rng(5);
    MlpSpec rs{3, {4, 4}, 2};
    std::vector<Tensor> rp;
    for (auto [fi, fo] : rs.layer_dims()) {
        rp.push_back(random_tensor({fo, fi}, rng));
        rp.push_back(random_tensor({fo}, rng));
    }
    Tensor rx = random_tensor({3, 3}, rng);
    Tensor ry = mlp_forward(rs, rp, rx);
    for (std::size_t row = 0; row < 3; ++row) {
        std::vector<double> cur{rx.at2(row, 0), rx.at2(row, 1), rx.at2(row, 2)};
        for (std::size_t l = 0; l < 3; ++l) {
            auto [fi, fo] = rs.layer_dims()[l];
            std::vector<double> nxt(fo, 0.0);
            for (std::size_t o = 0; o < fo; ++o) {
                double acc = rp[2 * l + 1][o];
                for (std::size_t i = 0; i < fi; ++i) acc += rp[2 * l].at2(o, i) * cur[i];
                nxt[o] = l + 1 < 3 ? std::tanh(acc) : acc;
            }
            cur = nxt;
        }
        for (std::size_t o = 0; o < 2; ++o) CHECK(std::fabs(ry.at2(row, o) - cur[o]) <= 1e-14);
    }
}

TEST_CASE("separable trunk pass counts match the factorized plan") {
    DeepONetConfig cfg = burgers_separable(4, 10);
    DeepONetModel m = init_params(cfg, 3);
    Tensor x_axis({50});
    Tensor t_axis({50});
    for (std::size_t i = 0; i < 50; ++i) {
        x_axis[i] = i / 49.0;
        t_axis[i] = i / 49.0;
    }
    auto res = trunk_forward_separable(m, std::vector<Tensor>{x_axis, t_axis});
    CHECK(res.mlp_passes == 100);

    Tensor t100({100});
    for (std::size_t i = 0; i < 100; ++i) t100[i] = i / 99.0;
    Tensor x2({2}, {0.0, 1.0});
    auto bc = trunk_forward_separable(m, std::vector<Tensor>{x2, t100});
    CHECK(bc.mlp_passes == 102);

    // vanilla counts one pass per meshgrid point
    DeepONetConfig vcfg = burgers_vanilla();
    vcfg.branch_hidden = {8};
    vcfg.trunk_hidden = {8};
    vcfg.p = 4;
    DeepONetModel vm = init_params(vcfg, 4);
    std::vector<Tensor> axes{x_axis, t_axis};
    Tensor pts = meshgrid_points(axes);
    auto vres = trunk_forward_vanilla(vm, pts);
    CHECK(vres.mlp_passes == 2500);
}

TEST_CASE("separable evaluation equals pointwise evaluation of the same parameters") {
    Rng seeds(123);
    for (std::size_t d = 1; d <= 4; ++d) {
        DeepONetConfig cfg = tiny_separable(d, d == 2 ? 2 : 1);
        DeepONetModel m = init_params(cfg, seeds.next_u64());
        Rng rng(d * 100 + 1);
        std::vector<Tensor> axes;
        for (std::size_t j = 0; j < d; ++j) axes.push_back(random_tensor({2 + (j % 3)}, rng));
        Tensor branch_in = random_tensor({3, cfg.sensors}, rng);

        auto fast = deeponet_eval(m, branch_in, axes);
        Tensor pts = meshgrid_points(axes);
        auto slow = deeponet_eval_points(m, branch_in, pts);

        REQUIRE(fast.fields.size() == slow.fields.size());
        for (std::size_t f = 0; f < fast.fields.size(); ++f) {
            REQUIRE(fast.fields[f].size() == slow.fields[f].size());
            CHECK(testsupport::max_abs_diff(fast.fields[f].values(), slow.fields[f].values()) <= 1e-12);
        }
        CHECK(fast.branch_passes == 3);
    }
}

TEST_CASE("d=1 separable equals rank-summed features") {
    DeepONetConfig cfg = tiny_separable(1);
    DeepONetModel m = init_params(cfg, 9);
    Rng rng(2);
    Tensor axis = random_tensor({5}, rng);
    auto res = trunk_forward_separable(m, std::vector<Tensor>{axis});
    // manual: evaluate the single sub-trunk, sum the rank axis
    Tensor in({5, 1}, std::vector<double>(axis.values().begin(), axis.values().end()));
    Tensor emb = mlp_forward(cfg.trunk_spec(), m.trunk_params(0), in);
    for (std::size_t a = 0; a < 5; ++a)
        for (std::size_t k = 0; k < cfg.p; ++k) {
            double acc = 0.0;
            for (std::size_t i = 0; i < cfg.r; ++i) acc += emb[a * cfg.p * cfg.r + k * cfg.r + i];
            CHECK(std::fabs(res.fields[0].at2(a, k) - acc) <= 1e-14);
        }
}

TEST_CASE("trivial deeponet_eval values") {
    // all-ones trunk features and branch embedding, zero bias, p=4 -> 4
    DeepONetConfig cfg;
    cfg.variant = Variant::vanilla;
    cfg.d = 1;
    cfg.p = 4;
    cfg.fields = 1;
    cfg.sensors = 2;
    cfg.branch_hidden = {};
    cfg.trunk_hidden = {};
    DeepONetModel m = init_params(cfg, 0);
    // zero weights; set output biases of both nets to 1 so features are all-ones
    for (std::size_t e = 0; e < m.params[0].size(); ++e) m.params[0][e] = 0.0; // branch W
    for (std::size_t e = 0; e < m.params[2].size(); ++e) m.params[2][e] = 0.0; // trunk W
    for (std::size_t e = 0; e < m.params[1].size(); ++e) m.params[1][e] = 1.0; // branch bias
    for (std::size_t e = 0; e < m.params[3].size(); ++e) m.params[3][e] = 1.0; // trunk bias
    Tensor branch_in({1, 2}, {3.0, -1.0});
    Tensor axis({3}, {0.0, 0.5, 1.0});
    auto out = deeponet_eval(m, branch_in, std::vector<Tensor>{axis});
    for (std::size_t e = 0; e < out.fields[0].size(); ++e)
        CHECK(out.fields[0][e] == doctest::Approx(4.0));

    // zero-weight trunk keeps features equal to the bias row everywhere
    Rng rng(12);
    DeepONetModel m2 = init_params(cfg, 1);
    for (std::size_t e = 0; e < m2.params[2].size(); ++e) m2.params[2][e] = 0.0;
    for (std::size_t e = 0; e < m2.params[3].size(); ++e) m2.params[3][e] = rng.next_unit();
    Tensor pts({3, 1}, {0.1, 0.2, 0.3});
    auto feats = trunk_forward_vanilla(m2, pts);
    for (std::size_t row = 0; row < 3; ++row)
        for (std::size_t k = 0; k < 4; ++k)
            CHECK(feats.fields[0].at2(row, k) == m2.params[3][k]);
}

TEST_CASE("checkpoint round-trip is bit exact") {
    DeepONetConfig cfg = tiny_separable(2, 2);
    DeepONetModel m = init_params(cfg, 31337);
    auto dir = std::filesystem::temp_directory_path() / "sepdon_ckpt_test";
    std::filesystem::create_directories(dir);
    std::string base = (dir / "model").string();
    save_checkpoint(m, base, 31337, 42);
    Checkpoint ck = load_checkpoint(base);
    CHECK(ck.seed == 31337);
    CHECK(ck.step == 42);
    REQUIRE(ck.model.params.size() == m.params.size());
    for (std::size_t i = 0; i < m.params.size(); ++i) {
        REQUIRE(ck.model.params[i].shape() == m.params[i].shape());
        for (std::size_t e = 0; e < m.params[i].size(); ++e)
            CHECK(ck.model.params[i][e] == m.params[i][e]);
    }

    // truncated blob -> corruption error
    auto blob_path = base + ".bin";
    auto size = std::filesystem::file_size(blob_path);
    std::filesystem::resize_file(blob_path, size - 8);
    CHECK_THROWS_AS(load_checkpoint(base), corruption_error);
    std::filesystem::remove_all(dir);
}

TEST_CASE("shape errors") {
    DeepONetConfig cfg = tiny_separable(2);
    DeepONetModel m = init_params(cfg, 0);
    Rng rng(1);
    Tensor bad_branch = random_tensor({2, cfg.sensors + 1}, rng);
    Tensor axis = random_tensor({3}, rng);
    std::vector<Tensor> axes{axis, axis};
    CHECK_THROWS_AS(deeponet_eval(m, bad_branch, axes), shape_error);
    std::vector<Tensor> one_axis{axis};
    Tensor ok_branch = random_tensor({2, cfg.sensors}, rng);
    CHECK_THROWS_AS(deeponet_eval(m, ok_branch, one_axis), shape_error);
}
