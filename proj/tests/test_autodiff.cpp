#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "sepdon/errors.hpp"
#include "sepdon/hyperdual.hpp"
#include "sepdon/rng.hpp"
#include "sepdon/tape.hpp"
#include "support.hpp"

using namespace sepdon;
using testsupport::close_to_fd;
using testsupport::random_tensor;

TEST_CASE("jvp2 analytic cases") {
    auto tanh_f = [](std::span<const HyperDual> x) { return tanh(x[0]); };
    double one = 1.0, zero = 0.0;
    auto r = jvp2(tanh_f, std::span<const double>(&zero, 1), std::span<const double>(&one, 1),
                  std::span<const double>(&one, 1));
    CHECK(r.value == 0.0);
    CHECK(r.deriv1 == 1.0);
    CHECK(r.deriv2 == 1.0);
    CHECK(r.deriv12 == 0.0);

    auto sq = [](std::span<const HyperDual> x) { return x[0] * x[0]; };
    double three = 3.0;
    auto r2 = jvp2(sq, std::span<const double>(&three, 1), std::span<const double>(&one, 1),
                   std::span<const double>(&one, 1));
    CHECK(r2.value == 9.0);
    CHECK(r2.deriv1 == 6.0);
    CHECK(r2.deriv2 == 6.0);
    CHECK(r2.deriv12 == 2.0);
}

TEST_CASE("jvp2 division by zero raises numeric error") {
    auto f = [](std::span<const HyperDual> x) { return 1.0 / x[0]; };
    double zero = 0.0, one = 1.0;
    CHECK_THROWS_AS(jvp2(f, std::span<const double>(&zero, 1), std::span<const double>(&one, 1),
                         std::span<const double>(&one, 1)),
                    numeric_error);
}

namespace {

// Plain-double 3-layer tanh MLP used as the FD reference for jvp2.
struct TinyMlp {
    std::vector<std::vector<double>> w; // [layer][out*in]
    std::vector<std::vector<double>> b;
    std::vector<int> widths; // input, hidden..., output

    static TinyMlp random(std::vector<int> widths, Rng& rng) {
        TinyMlp m;
        m.widths = widths;
        for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
            m.w.push_back({});
            m.b.push_back({});
            for (int i = 0; i < widths[l] * widths[l + 1]; ++i)
                m.w.back().push_back(rng.next_uniform(-0.8, 0.8));
            for (int i = 0; i < widths[l + 1]; ++i) m.b.back().push_back(rng.next_uniform(-0.2, 0.2));
        }
        return m;
    }

    template <typename T>
    T eval(std::span<const T> x) const {
        std::vector<T> cur(x.begin(), x.end());
        for (std::size_t l = 0; l < w.size(); ++l) {
            const int nin = widths[l], nout = widths[l + 1];
            std::vector<T> nxt(static_cast<std::size_t>(nout), T(0.0));
            for (int o = 0; o < nout; ++o) {
                T acc(b[l][static_cast<std::size_t>(o)]);
                for (int i = 0; i < nin; ++i) acc = acc + w[l][static_cast<std::size_t>(o * nin + i)] * cur[static_cast<std::size_t>(i)];
                nxt[static_cast<std::size_t>(o)] = (l + 1 < w.size()) ? tanh(acc) : acc;
            }
            cur = std::move(nxt);
        }
        return cur[0];
    }
};

double tanh_wrap(double x) { return std::tanh(x); }

} // namespace

TEST_CASE("jvp2 on a random tanh MLP matches central finite differences") {
    Rng rng(2024);
    TinyMlp mlp = TinyMlp::random({2, 5, 5, 1}, rng);
    (void)tanh_wrap;
    auto f = [&](std::span<const HyperDual> x) { return mlp.eval<HyperDual>(x); };
    auto fd_eval = [&](double a, double t) {
        std::vector<double> x{a, t};
        return mlp.eval<double>(x);
    };
    const double x0 = 0.3, t0 = -0.2, h = 1e-4;
    std::vector<double> pt{x0, t0};
    std::vector<double> ex{1.0, 0.0}, et{0.0, 1.0};
    auto r = jvp2(f, pt, ex, et);

    double fd_x = (fd_eval(x0 + h, t0) - fd_eval(x0 - h, t0)) / (2 * h);
    double fd_t = (fd_eval(x0, t0 + h) - fd_eval(x0, t0 - h)) / (2 * h);
    double fd_xt = (fd_eval(x0 + h, t0 + h) - fd_eval(x0 + h, t0 - h) - fd_eval(x0 - h, t0 + h) +
                    fd_eval(x0 - h, t0 - h)) /
                   (4 * h * h);
    CHECK(std::fabs(r.deriv1 - fd_x) <= 1e-6 * std::max(1.0, std::fabs(fd_x)));
    CHECK(std::fabs(r.deriv2 - fd_t) <= 1e-6 * std::max(1.0, std::fabs(fd_t)));
    CHECK(std::fabs(r.deriv12 - fd_xt) <= 1e-5 * std::max(1.0, std::fabs(fd_xt)));

    // pure second derivative via dir1 == dir2
    auto rxx = jvp2(f, pt, ex, ex);
    double fd_xx = (fd_eval(x0 + h, t0) - 2 * fd_eval(x0, t0) + fd_eval(x0 - h, t0)) / (h * h);
    CHECK(std::fabs(rxx.deriv12 - fd_xx) <= 1e-5 * std::max(1.0, std::fabs(fd_xx)));
}

TEST_CASE("jvp2 first tangents are linear in the directions") {
    Rng rng(5);
    TinyMlp mlp = TinyMlp::random({3, 4, 1}, rng);
    auto f = [&](std::span<const HyperDual> x) { return mlp.eval<HyperDual>(x); };
    std::vector<double> pt{0.1, -0.4, 0.7};
    std::vector<double> u{0.3, 1.2, -0.5}, v{1.0, 0.2, 0.8}, zero(3, 0.0);
    auto ru = jvp2(f, pt, u, zero);
    auto rv = jvp2(f, pt, v, zero);
    std::vector<double> uv(3);
    for (int i = 0; i < 3; ++i) uv[i] = 2.0 * u[i] + 3.0 * v[i];
    auto ruv = jvp2(f, pt, uv, zero);
    CHECK(std::fabs(ruv.deriv1 - (2.0 * ru.deriv1 + 3.0 * rv.deriv1)) <= 1e-13);
}

TEST_CASE("mixed partial symmetry on random composites") {
    Rng rng(17);
    for (int rep = 0; rep < 10; ++rep) {
        TinyMlp mlp = TinyMlp::random({2, 6, 1}, rng);
        auto f = [&](std::span<const HyperDual> x) {
            HyperDual base = mlp.eval<HyperDual>(x);
            return base * exp(x[0] * 0.3) + sin(x[1]) / (x[0] + 3.0);
        };
        std::vector<double> pt{rng.next_uniform(-0.5, 0.5), rng.next_uniform(-0.5, 0.5)};
        std::vector<double> u{1.0, 0.3}, v{-0.2, 1.0};
        auto r12 = jvp2(f, pt, u, v);
        auto r21 = jvp2(f, pt, v, u);
        CHECK(std::fabs(r12.deriv12 - r21.deriv12) <= 1e-13);
    }
}

// ---------------------------------------------------------------------------
// Tape: parameter gradients
// ---------------------------------------------------------------------------

TEST_CASE("grad_params on sum of squares is 2*theta") {
    Tensor theta({4}, {0.5, -1.0, 2.0, 3.0});
    std::vector<Tensor> params{theta};
    auto build = [](Tape& t, std::span<const Tape::Id> ids) {
        Tape::Id th = t.reshape(ids[0], {1, 4});
        Tape::Id sq = t.mul(th, th);
        Tape::Id m = t.mean_all(sq);
        return t.scale(m, 4.0); // sum = mean * n
    };
    double loss = 0.0;
    auto grads = grad_params(build, params, &loss);
    CHECK(loss == doctest::Approx(0.25 + 1 + 4 + 9));
    for (std::size_t i = 0; i < 4; ++i) CHECK(grads[0][i] == doctest::Approx(2.0 * theta[i]));
}

TEST_CASE("grad_params of a loss constant in theta is zero") {
    Tensor theta({3}, {1.0, 2.0, 3.0});
    std::vector<Tensor> params{theta};
    auto build = [](Tape& t, std::span<const Tape::Id>) {
        Tensor c({1}, {7.0});
        return t.input(c, false);
    };
    auto grads = grad_params(build, params, nullptr);
    for (std::size_t i = 0; i < 3; ++i) CHECK(grads[0][i] == 0.0);
}

namespace {

// Tape-built 2-layer MLP MSE loss over a fixed batch; the FD oracle
// re-evaluates the same loss at perturbed parameters.
struct MlpLossFixture {
    Tensor x;       // [B, in]
    Tensor y;       // [B, 1]
    std::size_t in = 3, hid = 4;

    Tape::Id build(Tape& t, std::span<const Tape::Id> ids) const {
        Tape::Id xi = t.input(x, false);
        Tape::Id h = t.tanh_(t.affine(xi, ids[0], ids[1]));
        Tape::Id out = t.affine(h, ids[2], ids[3]);
        Tape::Id yi = t.input(y, false);
        return t.mean_sq(t.sub(out, yi));
    }

    double value(std::span<const Tensor> p) const {
        double loss = 0.0;
        auto b = [this](Tape& t, std::span<const Tape::Id> ids) { return build(t, ids); };
        grad_params(b, p, &loss);
        return loss;
    }
};

} // namespace

TEST_CASE("grad_params on a random MLP MSE matches finite differences") {
    Rng rng(99);
    MlpLossFixture fx;
    fx.x = random_tensor({5, 3}, rng);
    fx.y = random_tensor({5, 1}, rng);
    std::vector<Tensor> params{random_tensor({4, 3}, rng, -0.7, 0.7), random_tensor({4}, rng, -0.2, 0.2),
                               random_tensor({1, 4}, rng, -0.7, 0.7), random_tensor({1}, rng, -0.2, 0.2)};

    auto build = [&fx](Tape& t, std::span<const Tape::Id> ids) { return fx.build(t, ids); };
    auto grads = grad_params(build, params, nullptr);

    const double h = 1e-5;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        for (std::size_t e = 0; e < params[pi].size(); ++e) {
            std::vector<Tensor> pp = params, pm = params;
            pp[pi][e] += h;
            pm[pi][e] -= h;
            double fd = (fx.value(pp) - fx.value(pm)) / (2 * h);
            CHECK_MESSAGE(close_to_fd(grads[pi][e], fd), "param ", pi, " elem ", e, " ad=",
                          grads[pi][e], " fd=", fd);
        }
    }
}

TEST_CASE("duplicated subexpressions accumulate like the expanded form") {
    // loss = (s + s) . s with s = W x; compare against 2 * s.s built separately
    Rng rng(123);
    Tensor w = random_tensor({3, 3}, rng);
    Tensor x = random_tensor({2, 3}, rng);
    std::vector<Tensor> params{w};

    auto build_shared = [&](Tape& t, std::span<const Tape::Id> ids) {
        Tape::Id xi = t.input(x, false);
        Tape::Id s = t.affine(xi, ids[0], -1);
        Tape::Id two_s = t.add(s, s);
        return t.mean_sq(two_s); // mean((2s)^2)
    };
    auto build_expanded = [&](Tape& t, std::span<const Tape::Id> ids) {
        Tape::Id xi = t.input(x, false);
        Tape::Id s = t.affine(xi, ids[0], -1);
        Tape::Id s4 = t.scale(t.mul(s, s), 4.0);
        return t.mean_all(s4);
    };
    auto g1 = grad_params(build_shared, params, nullptr);
    auto g2 = grad_params(build_expanded, params, nullptr);
    for (std::size_t e = 0; e < w.size(); ++e) {
        double denom = std::max(1e-30, std::fabs(g2[0][e]));
        CHECK(std::fabs(g1[0][e] - g2[0][e]) / denom <= 1e-13);
    }
}

TEST_CASE("grad through jvp2 composition: d/dtheta of (df/dx)^2 for f = theta*x") {
    // f(x) = theta * x at x = 2; loss = (df/dx)^2 = theta^2, dloss/dtheta = 2 theta.
    Tensor theta({1}, {1.7});
    std::vector<Tensor> params{theta};
    auto build = [](Tape& t, std::span<const Tape::Id> ids) {
        TapeValue x({1, 1}, 2);
        x.plane(0)[0] = 2.0;
        x.plane(1)[0] = 1.0; // tangent seed
        Tape::Id xi = t.input_seeded(std::move(x));
        Tape::Id th = t.reshape(ids[0], {1, 1});
        Tape::Id f = t.mul(th, xi); // ncomp promotes to 2
        Tape::Id dfdx = t.extract(f, 1);
        return t.mean_sq(dfdx);
    };
    double loss = 0.0;
    auto grads = grad_params_through_jvp2(build, params, &loss);
    CHECK(loss == doctest::Approx(1.7 * 1.7));
    CHECK(grads[0][0] == doctest::Approx(2.0 * 1.7));
}

TEST_CASE("grad through jvp2: second-derivative loss for f = 0.5*theta*x^2") {
    // d2f/dx2 = theta, loss = theta^2 -> gradient 2*theta.
    Tensor theta({1}, {-0.6});
    std::vector<Tensor> params{theta};
    auto build = [](Tape& t, std::span<const Tape::Id> ids) {
        TapeValue x({1, 1}, 4);
        x.plane(0)[0] = 0.8;
        x.plane(1)[0] = 1.0;
        x.plane(2)[0] = 1.0;
        Tape::Id xi = t.input_seeded(std::move(x));
        Tape::Id th = t.reshape(ids[0], {1, 1});
        Tape::Id x2 = t.mul(xi, xi);
        Tape::Id f = t.scale(t.mul(th, x2), 0.5);
        Tape::Id fxx = t.extract(f, 3);
        return t.mean_sq(fxx);
    };
    double loss = 0.0;
    auto grads = grad_params_through_jvp2(build, params, &loss);
    CHECK(loss == doctest::Approx(0.36));
    CHECK(grads[0][0] == doctest::Approx(-1.2));
}

TEST_CASE("non-finite loss reports the first bad node") {
    Tensor theta({1}, {0.0});
    std::vector<Tensor> params{theta};
    auto build = [](Tape& t, std::span<const Tape::Id> ids) {
        Tape::Id th = t.reshape(ids[0], {1, 1});
        Tensor one({1, 1}, {1.0});
        Tape::Id num = t.input(one, false);
        // 1/theta at theta=0 -> inf
        Tape::Id inv = t.mul(num, th); // zero
        Tape::Id bad = t.scale(inv, std::numeric_limits<double>::infinity());
        return t.mean_sq(bad);
    };
    CHECK_THROWS_AS(grad_params(build, params, nullptr), numeric_error);
}

TEST_CASE("tape outer_combine + contract match tensor kernels and support gradients") {
    Rng rng(31);
    Tensor part0 = random_tensor({3, 2, 2}, rng);
    Tensor part1 = random_tensor({4, 2, 2}, rng);
    Tensor branch = random_tensor({2, 2}, rng);

    // forward parity with the plain tensor kernels
    Tape t;
    std::vector<Tape::Id> parts{t.input(part0, true), t.input(part1, true)};
    Tape::Id comb = t.outer_combine(parts);
    Tape::Id br = t.input(branch, false);
    Tape::Id out = t.contract_bt(br, comb);
    std::vector<Tensor> plain_parts{part0, part1};
    Tensor plain = branch_trunk_contract(branch, outer_combine(plain_parts), 0.0);
    Tensor taped = t.value_tensor(out, 0);
    CHECK(testsupport::max_abs_diff(plain.values(), taped.values()) <= 1e-14);

    // FD check of gradients through the combine+contract pipeline
    std::vector<Tensor> params{part0, part1};
    auto build = [&](Tape& tp, std::span<const Tape::Id> ids) {
        Tape::Id c = tp.outer_combine(std::vector<Tape::Id>{ids[0], ids[1]});
        Tape::Id b = tp.input(branch, false);
        Tape::Id o = tp.contract_bt(b, c);
        return tp.mean_sq(o);
    };
    auto grads = grad_params(build, params, nullptr);
    auto value_at = [&](std::span<const Tensor> p) {
        double v = 0.0;
        grad_params(build, p, &v);
        return v;
    };
    const double h = 1e-5;
    for (std::size_t pi = 0; pi < 2; ++pi)
        for (std::size_t e = 0; e < params[pi].size(); e += 3) {
            auto pp = params;
            auto pm = params;
            pp[pi][e] += h;
            pm[pi][e] -= h;
            double fd = (value_at(pp) - value_at(pm)) / (2 * h);
            CHECK_MESSAGE(close_to_fd(grads[pi][e], fd, 1e-6, 1e-9), "pi=", pi, " e=", e);
        }
}
