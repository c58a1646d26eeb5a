#pragma once
// Empirical checks of the raw versus unitized objective: least-squares
// minimizers, gradient covariance, and convergence speed on corpora with
// low and high variance of ||y - x0||.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sparsebridge/bridge.hpp"
#include "sparsebridge/data.hpp"
#include "sparsebridge/nets.hpp"

namespace sparsebridge {

// One displacement y - x0 = r u with r >= 0 and unit u.
struct RadialSample {
    double r = 0;
    std::vector<double> u;

    void validate() const;
};

struct MinimizerResult {
    std::vector<double> f_raw;  // m_t mean(r u)
    std::vector<double> f_unit; // m_t mean(u)
    double gap = 0;             // ||f_raw - f_unit||
};

// Minimizers of E||T - f||^2 over constant predictors; zero-mean noise does
// not move them, so s_noise only enters through validation.
MinimizerResult minimizer_check(const std::vector<RadialSample> &samples, double m_t, double s_noise);

// Expected squared error of the constant predictor f (noise included).
double constant_predictor_risk(const std::vector<RadialSample> &samples, double m_t, double s_noise,
                               ObjectiveKind objective, const std::vector<double> &f);

// Monte-Carlo trace of Cov(-2 (T - f)) with T = m_t r u + s_noise eps (raw)
// or m_t u + s_noise eps (unitized), sample drawn uniformly from the set.
double gradient_covariance(const std::vector<RadialSample> &samples, double m_t, double s_noise, ObjectiveKind objective,
                           const std::vector<double> &predictor_value, long draws, std::uint64_t seed);
// 4 m_t^2 tr Cov(r u) + 4 s_noise^2 dim (raw); Cov(u) for unitized.
double gradient_covariance_closed_form(const std::vector<RadialSample> &samples, double m_t, double s_noise,
                                       ObjectiveKind objective);

// Displacements y - x0 of paired slices, one sample per pair.
std::vector<RadialSample> radial_samples(const PairBatch &pairs);

// First index at which the trailing-window mean lies within rel_tol of the
// final trailing-window mean.
int plateau_iteration(const std::vector<double> &trace, int window, double rel_tol = 0.05);

struct ConvergenceRun {
    std::string corpus;
    ObjectiveKind objective = ObjectiveKind::unitized;
    std::vector<double> trace;
    int plateau = 0;
};

struct ConvergenceOptions {
    DenoiserSpec denoiser{16, 8, 2, 32};
    TrainOptions train;
    int window = 50;
    double rel_tol = 0.05;
    std::uint64_t init_seed = 0;
};

// Trains identically initialized denoisers under both objectives on both
// corpora; runs are ordered (high, raw), (high, unitized), (low, raw), (low, unitized).
std::vector<ConvergenceRun> convergence_experiment(const PairBatch &high_var, const PairBatch &low_var,
                                                   const BridgeSchedule &sched, const ConvergenceOptions &opts);

void write_traces_csv(const std::filesystem::path &path, const std::vector<ConvergenceRun> &runs);
// Line plot of the window-smoothed traces, each normalized by its first value.
void write_traces_svg(const std::filesystem::path &path, const std::vector<ConvergenceRun> &runs, int window);

} // namespace sparsebridge
