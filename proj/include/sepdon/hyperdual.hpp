#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "sepdon/errors.hpp"

namespace sepdon {

// Truncated polynomial algebra R[e1,e2]/(e1^2, e2^2): value, two first-order
// tangents and the mixed second-order term. One evaluation of a composite
// function yields f, directional f', and the (mixed or pure) second
// directional derivative exactly, with no truncation error.
//
// Product rule carried by d12: (a*b).d12 = a.v*b.d12 + a.d1*b.d2 + a.d2*b.d1 + a.d12*b.v
struct HyperDual {
    double v = 0.0;
    double d1 = 0.0;
    double d2 = 0.0;
    double d12 = 0.0;

    HyperDual() = default;
    HyperDual(double value) : v(value) {}
    HyperDual(double value, double t1, double t2, double cross) : v(value), d1(t1), d2(t2), d12(cross) {}

    // Lift an analytic scalar function given f(v), f'(v), f''(v).
    static HyperDual chain(const HyperDual& x, double f, double df, double ddf) {
        return {f, df * x.d1, df * x.d2, df * x.d12 + ddf * x.d1 * x.d2};
    }
};

inline HyperDual operator+(const HyperDual& a, const HyperDual& b) {
    return {a.v + b.v, a.d1 + b.d1, a.d2 + b.d2, a.d12 + b.d12};
}
inline HyperDual operator-(const HyperDual& a, const HyperDual& b) {
    return {a.v - b.v, a.d1 - b.d1, a.d2 - b.d2, a.d12 - b.d12};
}
inline HyperDual operator-(const HyperDual& a) { return {-a.v, -a.d1, -a.d2, -a.d12}; }
inline HyperDual operator*(const HyperDual& a, const HyperDual& b) {
    return {a.v * b.v,
            a.v * b.d1 + a.d1 * b.v,
            a.v * b.d2 + a.d2 * b.v,
            a.v * b.d12 + a.d1 * b.d2 + a.d2 * b.d1 + a.d12 * b.v};
}
inline HyperDual inv(const HyperDual& b) {
    if (b.v == 0.0) throw numeric_error("hyper-dual division by zero value");
    double iv = 1.0 / b.v;
    return HyperDual::chain(b, iv, -iv * iv, 2.0 * iv * iv * iv);
}
inline HyperDual operator/(const HyperDual& a, const HyperDual& b) { return a * inv(b); }

inline HyperDual operator+(const HyperDual& a, double c) { return {a.v + c, a.d1, a.d2, a.d12}; }
inline HyperDual operator+(double c, const HyperDual& a) { return a + c; }
inline HyperDual operator-(const HyperDual& a, double c) { return {a.v - c, a.d1, a.d2, a.d12}; }
inline HyperDual operator-(double c, const HyperDual& a) { return {c - a.v, -a.d1, -a.d2, -a.d12}; }
inline HyperDual operator*(const HyperDual& a, double c) { return {a.v * c, a.d1 * c, a.d2 * c, a.d12 * c}; }
inline HyperDual operator*(double c, const HyperDual& a) { return a * c; }
inline HyperDual operator/(const HyperDual& a, double c) { return a * (1.0 / c); }
inline HyperDual operator/(double c, const HyperDual& a) { return c * inv(a); }

inline HyperDual tanh(const HyperDual& x) {
    double t = std::tanh(x.v);
    double g = 1.0 - t * t;
    return HyperDual::chain(x, t, g, -2.0 * t * g);
}
inline HyperDual exp(const HyperDual& x) {
    double e = std::exp(x.v);
    return HyperDual::chain(x, e, e, e);
}
inline HyperDual sin(const HyperDual& x) {
    double s = std::sin(x.v), c = std::cos(x.v);
    return HyperDual::chain(x, s, c, -s);
}
inline HyperDual cos(const HyperDual& x) {
    double s = std::sin(x.v), c = std::cos(x.v);
    return HyperDual::chain(x, c, -s, -c);
}
inline HyperDual pow_int(const HyperDual& x, int n) {
    if (n == 0) return HyperDual(1.0);
    if (n < 0) return inv(pow_int(x, -n));
    // f = v^n by value; derivatives from the analytic chain rule.
    double f = 1.0, fm1 = 1.0, fm2 = 1.0;
    f = std::pow(x.v, n);
    fm1 = n >= 1 ? std::pow(x.v, n - 1) : 0.0;
    fm2 = n >= 2 ? std::pow(x.v, n - 2) : 0.0;
    return HyperDual::chain(x, f, n * fm1, static_cast<double>(n) * (n - 1) * fm2);
}
inline HyperDual sqrt(const HyperDual& x) {
    double s = std::sqrt(x.v);
    if (s == 0.0) throw numeric_error("hyper-dual sqrt at zero has no finite derivative");
    return HyperDual::chain(x, s, 0.5 / s, -0.25 / (s * s * s));
}

struct Jvp2Result {
    double value;
    double deriv1;  // directional derivative along dir1
    double deriv2;  // directional derivative along dir2
    double deriv12; // second-order cross term (pure second derivative if dir1 == dir2)
};

// Forward-mode evaluation of a scalar function of a point: seeds dir1/dir2 as
// the two tangents and reads the exact directional derivatives off the output.
inline Jvp2Result jvp2(const std::function<HyperDual(std::span<const HyperDual>)>& f,
                       std::span<const double> x,
                       std::span<const double> dir1,
                       std::span<const double> dir2) {
    if (dir1.size() != x.size() || dir2.size() != x.size())
        throw std::invalid_argument("jvp2: direction dimensionality must match the point");
    std::vector<HyperDual> lifted(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) lifted[i] = {x[i], dir1[i], dir2[i], 0.0};
    HyperDual out = f(lifted);
    return {out.v, out.d1, out.d2, out.d12};
}

// Vector-valued variant: one lifted evaluation, one result per output.
inline std::vector<Jvp2Result> jvp2_vec(
    const std::function<std::vector<HyperDual>(std::span<const HyperDual>)>& f,
    std::span<const double> x, std::span<const double> dir1, std::span<const double> dir2) {
    if (dir1.size() != x.size() || dir2.size() != x.size())
        throw std::invalid_argument("jvp2: direction dimensionality must match the point");
    std::vector<HyperDual> lifted(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) lifted[i] = {x[i], dir1[i], dir2[i], 0.0};
    std::vector<HyperDual> out = f(lifted);
    std::vector<Jvp2Result> res(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) res[i] = {out[i].v, out[i].d1, out[i].d2, out[i].d12};
    return res;
}

} // namespace sepdon
