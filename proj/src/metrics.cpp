#include "sparsebridge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "sparsebridge/errors.hpp"

namespace sparsebridge {

namespace {

void check_pair(const Tensor &a, const Tensor &b, const char *what) {
    if (!a.same_shape(b)) throw InvalidArgument(std::string(what) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
    if (a.empty()) throw InvalidArgument(std::string(what) + ": empty input");
}

void check_volumes(const Volume &a, const Volume &b, const char *what) {
    if (a.positions() != b.positions()) throw InvalidArgument(std::string(what) + ": volumes cover different positions");
    if (a.slices.empty()) throw InvalidArgument(std::string(what) + ": empty volume");
}

double mse(const Tensor &a, const Tensor &b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    return acc / static_cast<double>(a.size());
}

std::vector<double> gaussian_window(int size, double sigma) {
    std::vector<double> w(size);
    double sum = 0;
    for (int i = 0; i < size; ++i) {
        const double d = i - (size - 1) / 2.0;
        w[i] = std::exp(-d * d / (2 * sigma * sigma));
        sum += w[i];
    }
    for (auto &v : w) v /= sum;
    return w;
}

} // namespace

double nrmse(const Tensor &pred, const Tensor &truth) {
    check_pair(pred, truth, "nrmse");
    const auto [lo, hi] = std::minmax_element(truth.values().begin(), truth.values().end());
    const double range = *hi - *lo;
    if (!(range > 0.0)) throw NormalizationError("nrmse: truth has zero intensity range");
    return std::sqrt(mse(pred, truth)) / range;
}

double nrmse(const Volume &pred, const Volume &truth) {
    check_volumes(pred, truth, "nrmse");
    return nrmse(pred.stacked(), truth.stacked());
}

double psnr(const Tensor &pred, const Tensor &truth, double max_val, double cap_db) {
    check_pair(pred, truth, "psnr");
    require(max_val > 0.0, "psnr: max_val must be positive");
    const double e = mse(pred, truth);
    if (e == 0.0) return cap_db;
    return std::min(cap_db, 10.0 * std::log10(max_val * max_val / e));
}

double psnr(const Volume &pred, const Volume &truth, double max_val, double cap_db) {
    check_volumes(pred, truth, "psnr");
    return psnr(pred.stacked(), truth.stacked(), max_val, cap_db);
}

double ssim(const Tensor &a, const Tensor &b, const SsimOptions &o) {
    check_pair(a, b, "ssim");
    require(a.rank() == 2, "ssim: expected {H,W} slices, got " + a.shape_string());
    require(o.window >= 1 && o.sigma > 0.0, "ssim: invalid window");
    const int h = a.dim(0), w = a.dim(1), k = o.window;
    if (h < k || w < k)
        throw InvalidArgument("ssim: image " + a.shape_string() + " smaller than the " + std::to_string(k) + "-pixel window");
    const auto g = gaussian_window(k, o.sigma);
    const double c1 = (o.k1 * o.max_val) * (o.k1 * o.max_val), c2 = (o.k2 * o.max_val) * (o.k2 * o.max_val);

    // Separable filtering of the five moment images, valid region only.
    const int ho = h - k + 1, wo = w - k + 1;
    std::vector<double> src[5];
    for (auto &s : src) s.resize(static_cast<std::size_t>(h) * w);
    for (int i = 0; i < h * w; ++i) {
        src[0][i] = a[i];
        src[1][i] = b[i];
        src[2][i] = a[i] * a[i];
        src[3][i] = b[i] * b[i];
        src[4][i] = a[i] * b[i];
    }
    std::vector<double> filt[5];
    std::vector<double> tmp(static_cast<std::size_t>(h) * wo);
    for (int c = 0; c < 5; ++c) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < wo; ++x) {
                double acc = 0;
                for (int j = 0; j < k; ++j) acc += g[j] * src[c][y * w + x + j];
                tmp[y * wo + x] = acc;
            }
        filt[c].assign(static_cast<std::size_t>(ho) * wo, 0.0);
        for (int y = 0; y < ho; ++y)
            for (int x = 0; x < wo; ++x) {
                double acc = 0;
                for (int j = 0; j < k; ++j) acc += g[j] * tmp[(y + j) * wo + x];
                filt[c][y * wo + x] = acc;
            }
    }
    double total = 0;
    for (int i = 0; i < ho * wo; ++i) {
        const double ma = filt[0][i], mb = filt[1][i];
        const double va = filt[2][i] - ma * ma, vb = filt[3][i] - mb * mb, cov = filt[4][i] - ma * mb;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    return total / (ho * wo);
}

double ssim(const Volume &a, const Volume &b, const SsimOptions &opts) {
    check_volumes(a, b, "ssim");
    double acc = 0;
    for (std::size_t i = 0; i < a.slices.size(); ++i) acc += ssim(a.slices[i].pixels, b.slices[i].pixels, opts);
    return acc / static_cast<double>(a.slices.size());
}

double issim(const Volume &volume, const SsimOptions &opts) {
    if (volume.slices.size() < 2) throw InvalidArgument("issim: need at least two slices");
    double acc = 0;
    for (std::size_t i = 0; i + 1 < volume.slices.size(); ++i)
        acc += ssim(volume.slices[i].pixels, volume.slices[i + 1].pixels, opts);
    return acc / static_cast<double>(volume.slices.size() - 1);
}

double weighted_risk(int y_true, int y_pred, double w_fn, double w_fp) {
    require((y_true == 0 || y_true == 1) && (y_pred == 0 || y_pred == 1), "weighted_risk: labels must be 0 or 1");
    require(w_fn >= 0.0 && w_fp >= 0.0, "weighted_risk: weights must be non-negative");
    if (y_true == 1 && y_pred == 0) return w_fn;
    if (y_true == 0 && y_pred == 1) return w_fp;
    return 0.0;
}

double weighted_risk(const std::vector<int> &y_true, const std::vector<int> &y_pred, double w_fn, double w_fp) {
    require(y_true.size() == y_pred.size() && !y_true.empty(), "weighted_risk: label vectors must be non-empty and equal length");
    double acc = 0;
    for (std::size_t i = 0; i < y_true.size(); ++i) acc += weighted_risk(y_true[i], y_pred[i], w_fn, w_fp);
    return acc / static_cast<double>(y_true.size());
}

nlohmann::json MetricsReport::to_json() const {
    return {{"nrmse", nrmse},           {"psnr", psnr},
            {"ssim", ssim},             {"issim", issim},
            {"positions", positions},   {"slice_ssim", slice_ssim},
            {"slice_psnr", slice_psnr}};
}

std::string MetricsReport::csv_header() { return "label,nrmse,psnr,ssim,issim,slices"; }

std::string MetricsReport::csv_row(const std::string &label) const {
    std::ostringstream os;
    os.precision(10);
    os << label << ',' << nrmse << ',' << psnr << ',' << ssim << ',' << issim << ',' << positions.size();
    return os.str();
}

MetricsReport evaluate_volume(const Volume &pred, const Volume &truth, const SsimOptions &opts) {
    check_volumes(pred, truth, "evaluate_volume");
    MetricsReport r;
    r.positions = truth.positions();
    r.nrmse = nrmse(pred, truth);
    r.psnr = psnr(pred, truth);
    double acc = 0;
    for (std::size_t i = 0; i < pred.slices.size(); ++i) {
        r.slice_ssim.push_back(ssim(pred.slices[i].pixels, truth.slices[i].pixels, opts));
        r.slice_psnr.push_back(psnr(pred.slices[i].pixels, truth.slices[i].pixels));
        acc += r.slice_ssim.back();
    }
    r.ssim = acc / static_cast<double>(pred.slices.size());
    r.issim = pred.slices.size() >= 2 ? issim(pred, opts) : 1.0;
    return r;
}

} // namespace sparsebridge
