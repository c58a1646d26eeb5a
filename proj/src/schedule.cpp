#include "sparsebridge/schedule.hpp"

#include <algorithm>
#include <cmath>

#include "sparsebridge/errors.hpp"
#include "sparsebridge/rng.hpp"

namespace sparsebridge {

double BridgeSchedule::transition_slope(int t) const {
    require(t >= 1 && t <= T, "transition_slope: t out of range");
    return (1.0 - m[t]) / (1.0 - m[t - 1]);
}

BridgeSchedule build_schedule(int T, double s) {
    if (T < 2) throw InvalidArgument("build_schedule: T must be >= 2, got " + std::to_string(T));
    if (!(s > 0.0) || !std::isfinite(s)) throw InvalidArgument("build_schedule: s must be positive");

    BridgeSchedule sc;
    sc.T = T;
    sc.s = s;
    const std::size_t n = static_cast<std::size_t>(T) + 1;
    sc.m.resize(n);
    sc.delta.resize(n);
    sc.delta_step.assign(n, 0.0);
    sc.post_var.assign(n, 0.0);
    sc.coef_x.assign(n, 0.0);
    sc.coef_y.assign(n, 0.0);
    sc.coef_eps.assign(n, 0.0);

    for (int t = 0; t <= T; ++t) {
        sc.m[t] = static_cast<double>(t) / T;
        sc.delta[t] = 2.0 * s * (sc.m[t] - sc.m[t] * sc.m[t]);
    }
    sc.m[T] = 1.0;
    sc.delta[0] = 0.0;
    sc.delta[T] = 0.0;

    for (int t = 1; t <= T; ++t) {
        const double r = (1.0 - sc.m[t]) / (1.0 - sc.m[t - 1]);
        // Clamp tiny negative round-off; the exact value is non-negative.
        sc.delta_step[t] = std::max(0.0, sc.delta[t] - sc.delta[t - 1] * r * r);
    }
    sc.delta_step[T] = 0.0;

    for (int t = 1; t < T; ++t) {
        const double dt = sc.delta[t];
        const double a = (1.0 - sc.m[t]) / (1.0 - sc.m[t - 1]);
        const double b = sc.m[t] - a * sc.m[t - 1];
        sc.post_var[t] = sc.delta_step[t] * sc.delta[t - 1] / dt;

        // Gaussian conditioning of x_{t-1} ~ N(mu_{t-1}, delta_{t-1}) on
        // x_t = a x_{t-1} + b y + N(0, delta_{t|t-1}), expressed in (x_t, x_0, y);
        // x_0 is then eliminated through x_0 = x_t - n_t.
        const double cx = a * sc.delta[t - 1] / dt;
        const double c0 = (1.0 - sc.m[t - 1]) * sc.delta_step[t] / dt;
        const double cy = sc.m[t - 1] * sc.delta_step[t] / dt - a * b * sc.delta[t - 1] / dt;
        sc.coef_x[t] = cx + c0;
        sc.coef_y[t] = cy;
        sc.coef_eps[t] = -c0;
    }
    return sc;
}

PosteriorParams posterior_params(const BridgeSchedule &sched, int t) {
    if (t < 1 || t > sched.T - 1)
        throw InvalidArgument("posterior_params: t must lie in [1, T-1], got " + std::to_string(t));
    return {sched.coef_x[t], sched.coef_y[t], sched.coef_eps[t], sched.post_var[t]};
}

double posterior_mean(const BridgeSchedule &sched, int t, double x_t, double x0, double y) {
    const auto p = posterior_params(sched, t);
    return p.c_x * x_t + p.c_y * y + p.c_eps * (x_t - x0);
}

double posterior_oracle_check(const BridgeSchedule &sched, int trials, std::uint64_t seed) {
    require(trials >= 1, "posterior_oracle_check: trials must be >= 1");
    const int T = sched.T;

    // Propagate the Markov chain from the pinned x_0 to get, for each t, the
    // variance of x_t and the linear dependence of its mean on (x_0, y).
    // Independent of the posterior coefficient algebra above.
    std::vector<double> var(T + 1, 0.0), mean_x0(T + 1, 0.0), mean_y(T + 1, 0.0);
    mean_x0[0] = 1.0;
    for (int t = 1; t <= T; ++t) {
        const double a = sched.transition_slope(t);
        const double b = sched.m[t] - a * sched.m[t - 1];
        var[t] = a * a * var[t - 1] + sched.delta_step[t];
        mean_x0[t] = a * mean_x0[t - 1];
        mean_y[t] = a * mean_y[t - 1] + b;
    }

    Rng rng(seed);
    double worst = 0.0;
    for (int k = 0; k < trials; ++k) {
        const int t = static_cast<int>(rng.integer(1, T - 1));
        const double x0 = 4.0 * rng.uniform() - 2.0;
        const double y = (k % 10 == 0) ? x0 : 4.0 * rng.uniform() - 2.0;
        const double mu_prev = mean_x0[t - 1] * x0 + mean_y[t - 1] * y;
        const double mu_t = mean_x0[t] * x0 + mean_y[t] * y;
        const double x_t = mu_t + std::sqrt(var[t]) * rng.normal();

        // Joint covariance of (x_{t-1}, x_t); condition the first on the second.
        const double cross = sched.transition_slope(t) * var[t - 1];
        const double oracle_mean = mu_prev + cross / var[t] * (x_t - mu_t);
        const double oracle_var = var[t - 1] - cross * cross / var[t];

        const auto p = posterior_params(sched, t);
        const double mean = p.c_x * x_t + p.c_y * y + p.c_eps * (x_t - x0);
        worst = std::max({worst, std::abs(mean - oracle_mean), std::abs(p.var - oracle_var)});
    }
    return worst;
}

} // namespace sparsebridge
