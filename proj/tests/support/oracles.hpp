#pragma once
// Test-side reference computations, written independently of the library
// code they check.

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "sparsebridge/autograd.hpp"
#include "sparsebridge/rng.hpp"
#include "sparsebridge/tensor.hpp"

namespace oracle {

using sparsebridge::Rng;
using sparsebridge::Tensor;

inline Tensor random_tensor(std::vector<int> shape, Rng &rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (auto &v : t.values()) v = scale * rng.normal();
    return t;
}

inline std::vector<double> random_vector(int n, Rng &rng) {
    std::vector<double> v(n);
    for (auto &x : v) x = rng.normal();
    return v;
}

inline Tensor uniform_tensor(std::vector<int> shape, Rng &rng) {
    Tensor t(std::move(shape));
    for (auto &v : t.values()) v = rng.uniform();
    return t;
}

// Joint Gaussian of the bridge chain for a scalar pinned at x0 (t = 0) with
// transitions x_t = a_t x_{t-1} + b_t y + N(0, q_t). Built from the raw
// definitions m_t = t/T, delta_t = 2 s (m_t - m_t^2).
struct ScalarChain {
    int T;
    double s;
    std::vector<double> m, delta, a, b, q, var, cx0, cy;

    ScalarChain(int T_, double s_) : T(T_), s(s_) {
        m.resize(T + 1);
        delta.resize(T + 1);
        for (int t = 0; t <= T; ++t) {
            m[t] = double(t) / T;
            delta[t] = 2 * s * (m[t] - m[t] * m[t]);
        }
        a.assign(T + 1, 0);
        b.assign(T + 1, 0);
        q.assign(T + 1, 0);
        var.assign(T + 1, 0);
        cx0.assign(T + 1, 0);
        cy.assign(T + 1, 0);
        cx0[0] = 1;
        for (int t = 1; t <= T; ++t) {
            a[t] = (1 - m[t]) / (1 - m[t - 1]);
            b[t] = m[t] - a[t] * m[t - 1];
            q[t] = delta[t] - a[t] * a[t] * delta[t - 1];
            var[t] = a[t] * a[t] * var[t - 1] + q[t];
            cx0[t] = a[t] * cx0[t - 1];
            cy[t] = a[t] * cy[t - 1] + b[t];
        }
    }

    // Posterior of x_{t-1} given x_t, x0, y by conditioning the 2x2 joint.
    std::pair<double, double> posterior(int t, double x_t, double x0, double y) const {
        const double mu_prev = cx0[t - 1] * x0 + cy[t - 1] * y;
        const double mu_t = cx0[t] * x0 + cy[t] * y;
        const double cov = a[t] * var[t - 1];
        return {mu_prev + cov / var[t] * (x_t - mu_t), var[t - 1] - cov * cov / var[t]};
    }
};

// Central finite-difference derivative of f at x along coordinate i.
inline double central_diff(const std::function<double()> &f, double &x, double h) {
    const double saved = x;
    x = saved + h;
    const double fp = f();
    x = saved - h;
    const double fm = f();
    x = saved;
    return (fp - fm) / (2 * h);
}

inline double l2(std::span<const double> v) {
    double acc = 0;
    for (double x : v) acc += x * x;
    return std::sqrt(acc);
}

inline double rel_err(double a, double b, double floor = 1e-8) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Golden-section minimum of a unimodal function on [lo, hi].
inline double golden_min(const std::function<double(double)> &f, double lo, double hi, int iters = 200) {
    const double g = (std::sqrt(5.0) - 1) / 2;
    double c = hi - g * (hi - lo), d = lo + g * (hi - lo);
    double fc = f(c), fd = f(d);
    for (int i = 0; i < iters; ++i) {
        if (fc < fd) {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = f(d);
        }
    }
    return (lo + hi) / 2;
}

} // namespace oracle
