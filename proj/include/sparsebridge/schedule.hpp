#pragma once
// Brownian-bridge variance schedule and closed-form posterior algebra.
//
// Index convention: t = 0 is the target endpoint (x_0), t = T the source
// endpoint (x_T = y). Marginal: x_t ~ N((1 - m_t) x_0 + m_t y, delta_t I) with
// m_t = t / T and delta_t = 2 s (m_t - m_t^2).

#include <cstdint>
#include <vector>

namespace sparsebridge {

struct BridgeSchedule {
    int T = 0;
    double s = 1.0;
    std::vector<double> m;          // length T+1
    std::vector<double> delta;      // marginal variance delta_t
    std::vector<double> delta_step; // transition variance delta_{t|t-1}; entry 0 unused (0)
    std::vector<double> post_var;   // posterior variance; 0 where delta_t = 0
    // Posterior mean coefficients: mean = coef_x x_t + coef_y y + coef_eps * n_t,
    // with n_t = x_t - x_0 = m_t (y - x_0) + sqrt(delta_t) eps (the raw noise).
    std::vector<double> coef_x;
    std::vector<double> coef_y;
    std::vector<double> coef_eps;

    // Transition slope a_t = (1 - m_t) / (1 - m_{t-1}) of x_t on x_{t-1}.
    double transition_slope(int t) const;
};

BridgeSchedule build_schedule(int T, double s = 1.0);

struct PosteriorParams {
    double c_x;
    double c_y;
    double c_eps;
    double var;
};

// Valid for 1 <= t <= T-1.
PosteriorParams posterior_params(const BridgeSchedule &sched, int t);

// Posterior mean of x_{t-1} for scalar inputs using the coefficient form.
double posterior_mean(const BridgeSchedule &sched, int t, double x_t, double x0, double y);

// Closed-form versus numeric Gaussian-conditioning discrepancy over random
// scalar draws of (x_0, y, x_t, t). Returns the max absolute error over means
// and variances.
double posterior_oracle_check(const BridgeSchedule &sched, int trials, std::uint64_t seed);

} // namespace sparsebridge
