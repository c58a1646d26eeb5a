#pragma once
// Reconstruction quality metrics and the asymmetric misclassification risk.

#include <string>
#include <vector>

#include <json.hpp>

#include "sparsebridge/data.hpp"
#include "sparsebridge/tensor.hpp"

namespace sparsebridge {

// RMSE divided by the truth's intensity range. Throws NormalizationError for constant truth.
double nrmse(const Tensor &pred, const Tensor &truth);
double nrmse(const Volume &pred, const Volume &truth);

// 10 log10(max_val^2 / MSE); returns cap_db when MSE is zero.
double psnr(const Tensor &pred, const Tensor &truth, double max_val = 1.0, double cap_db = 100.0);
double psnr(const Volume &pred, const Volume &truth, double max_val = 1.0, double cap_db = 100.0);

struct SsimOptions {
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double max_val = 1.0;
};

// Mean local SSIM over all fully contained Gaussian windows of two {H,W} slices.
double ssim(const Tensor &a, const Tensor &b, const SsimOptions &opts = {});
// Mean per-slice SSIM over matching positions.
double ssim(const Volume &a, const Volume &b, const SsimOptions &opts = {});
// Mean SSIM between consecutive slices of one volume.
double issim(const Volume &volume, const SsimOptions &opts = {});

// w_fn * [y = 1, y_hat = 0] + w_fp * [y = 0, y_hat = 1].
double weighted_risk(int y_true, int y_pred, double w_fn, double w_fp);
double weighted_risk(const std::vector<int> &y_true, const std::vector<int> &y_pred, double w_fn, double w_fp);

struct MetricsReport {
    double nrmse = 0;
    double psnr = 0;
    double ssim = 0;
    double issim = 0;
    std::vector<long> positions;
    std::vector<double> slice_ssim;
    std::vector<double> slice_psnr;

    nlohmann::json to_json() const;
    static std::string csv_header();
    std::string csv_row(const std::string &label) const;
};

// Compares volumes with identical position sets; issim is that of `pred`.
MetricsReport evaluate_volume(const Volume &pred, const Volume &truth, const SsimOptions &opts = {});

} // namespace sparsebridge
