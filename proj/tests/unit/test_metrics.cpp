#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "sparsebridge/errors.hpp"
#include "sparsebridge/metrics.hpp"

using namespace sparsebridge;

namespace {

// Direct 2-D Gaussian-window SSIM over every fully contained window.
double ssim_oracle(const Tensor &a, const Tensor &b, int k = 11, double sigma = 1.5) {
    const int h = a.dim(0), w = a.dim(1);
    std::vector<double> g(k * k);
    double sum = 0;
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
            const double di = i - (k - 1) / 2.0, dj = j - (k - 1) / 2.0;
            g[i * k + j] = std::exp(-(di * di + dj * dj) / (2 * sigma * sigma));
            sum += g[i * k + j];
        }
    for (auto &v : g) v /= sum;
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    double total = 0;
    int n = 0;
    for (int y = 0; y + k <= h; ++y)
        for (int x = 0; x + k <= w; ++x, ++n) {
            double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
            for (int i = 0; i < k; ++i)
                for (int j = 0; j < k; ++j) {
                    const double wt = g[i * k + j], va = a[(y + i) * w + x + j], vb = b[(y + i) * w + x + j];
                    ma += wt * va;
                    mb += wt * vb;
                    saa += wt * va * va;
                    sbb += wt * vb * vb;
                    sab += wt * va * vb;
                }
            const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
            total += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    return total / n;
}

Volume make_volume(const std::vector<Tensor> &slices) {
    Volume v;
    v.subject_id = "v";
    v.modality = Modality::target;
    v.dense_extent = static_cast<long>(slices.size());
    v.height = slices[0].dim(0);
    v.width = slices[0].dim(1);
    for (std::size_t i = 0; i < slices.size(); ++i) v.slices.push_back({slices[i], "v", Modality::target, static_cast<long>(i), 1.0});
    return v;
}

Tensor ramp(int h, int w) {
    Tensor t({h, w});
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) t[i * w + j] = static_cast<double>(i * w + j) / (h * w - 1);
    return t;
}

} // namespace

TEST_CASE("nrmse") {
    Rng rng(1);
    const Tensor truth = ramp(16, 16);
    CHECK(nrmse(truth, truth) == 0.0);
    Tensor shifted = truth;
    for (auto &v : shifted.values()) v += 0.1;
    CHECK(nrmse(shifted, truth) == doctest::Approx(0.1).epsilon(1e-12));

    const Tensor pred = oracle::uniform_tensor({16, 16}, rng);
    Tensor pa = pred, ta = truth;
    for (auto &v : pa.values()) v = 3.0 * v - 2.0;
    for (auto &v : ta.values()) v = 3.0 * v - 2.0;
    CHECK(nrmse(pa, ta) == doctest::Approx(nrmse(pred, truth)).epsilon(1e-12));
    Tensor pt = pred, tt = truth;
    for (auto &v : pt.values()) v += 5.0;
    for (auto &v : tt.values()) v += 5.0;
    CHECK(nrmse(pt, tt) == doctest::Approx(nrmse(pred, truth)).epsilon(1e-12));

    CHECK_THROWS_AS(nrmse(pred, Tensor({16, 16}, 0.3)), NormalizationError);
    CHECK_THROWS_AS(nrmse(pred, Tensor({8, 8}, 0.3)), InvalidArgument);
}

TEST_CASE("psnr") {
    const Tensor truth({10, 10}, 0.5);
    Tensor pred = truth;
    CHECK(psnr(pred, truth) == 100.0);
    for (auto &v : pred.values()) v += 0.1; // MSE 0.01
    CHECK(psnr(pred, truth) == doctest::Approx(20.0).epsilon(1e-12));
    Tensor half = truth;
    for (auto &v : half.values()) v += 0.1 / std::sqrt(2.0);
    CHECK(psnr(half, truth) - psnr(pred, truth) == doctest::Approx(10.0 * std::log10(2.0)).epsilon(1e-10));
    CHECK(10.0 * std::log10(2.0) == doctest::Approx(3.0103).epsilon(1e-5));

    double prev = 1e9;
    for (double e : {0.001, 0.01, 0.05, 0.2}) {
        Tensor p = truth;
        for (auto &v : p.values()) v += e;
        const double db = psnr(p, truth);
        CHECK(db < prev);
        prev = db;
    }
    CHECK_THROWS_AS(psnr(pred, truth, 0.0), InvalidArgument);
}

TEST_CASE("ssim matches the direct windowed oracle") {
    Rng rng(4);
    for (int trial = 0; trial < 5; ++trial) {
        const Tensor a = oracle::uniform_tensor({20, 17}, rng);
        Tensor b = a;
        for (auto &v : b.values()) v = std::clamp(v + 0.2 * rng.normal(), 0.0, 1.0);
        CHECK(ssim(a, b) == doctest::Approx(ssim_oracle(a, b)).epsilon(1e-10));
    }
}

TEST_CASE("ssim identities") {
    Rng rng(5);
    const Tensor a = oracle::uniform_tensor({16, 16}, rng), b = oracle::uniform_tensor({16, 16}, rng);
    CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));
    CHECK(ssim(a, b) <= 1.0);
    CHECK(ssim(a, b) >= -1.0);
    Tensor inv = a;
    for (auto &v : inv.values()) v = 1.0 - v;
    CHECK(ssim(a, inv) < 1.0);
    CHECK(ssim(Tensor({12, 12}, 0.4), Tensor({12, 12}, 0.4)) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_THROWS_AS(ssim(Tensor({8, 8}), Tensor({8, 8})), InvalidArgument);
}

TEST_CASE("issim") {
    Rng rng(6);
    const Tensor a = oracle::uniform_tensor({16, 16}, rng);
    CHECK(issim(make_volume({a, a, a, a})) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(issim(make_volume({Tensor({16, 16}, 0.3), Tensor({16, 16}, 0.3)})) == doctest::Approx(1.0).epsilon(1e-12));

    const Tensor b = oracle::uniform_tensor({16, 16}, rng), c = oracle::uniform_tensor({16, 16}, rng);
    const double s1 = ssim(a, b), s2 = ssim(b, c);
    CHECK(issim(make_volume({a, b, c})) == doctest::Approx((s1 + s2) / 2).epsilon(1e-12));
    CHECK(issim(make_volume({c, b, a})) == doctest::Approx(issim(make_volume({a, b, c}))).epsilon(1e-12));
    CHECK_THROWS_AS(issim(make_volume({a})), InvalidArgument);
}

TEST_CASE("weighted risk") {
    CHECK(weighted_risk(1, 0, 10, 1) == 10);
    CHECK(weighted_risk(0, 1, 10, 1) == 1);
    CHECK(weighted_risk(1, 1, 10, 1) == 0);
    CHECK(weighted_risk(0, 0, 10, 1) == 0);
    CHECK(weighted_risk(std::vector<int>{1, 0, 1, 0}, std::vector<int>{0, 1, 1, 0}, 10, 1) == doctest::Approx(11.0 / 4));
    CHECK_THROWS_AS(weighted_risk(2, 0, 1, 1), InvalidArgument);
    CHECK_THROWS_AS(weighted_risk(1, 0, -1, 1), InvalidArgument);
}

TEST_CASE("metrics report") {
    Rng rng(7);
    std::vector<Tensor> s;
    for (int i = 0; i < 3; ++i) s.push_back(oracle::uniform_tensor({12, 12}, rng));
    const Volume v = make_volume(s);
    const auto r = evaluate_volume(v, v);
    CHECK(r.nrmse == 0.0);
    CHECK(r.psnr == 100.0);
    CHECK(r.ssim == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.slice_ssim.size() == 3);
    CHECK(r.issim == doctest::Approx(issim(v)).epsilon(1e-12));
    const auto j = r.to_json();
    CHECK(j.at("nrmse").get<double>() == 0.0);
    CHECK(j.at("positions").size() == 3);
    CHECK(MetricsReport::csv_header().rfind("label,", 0) == 0);
    CHECK(r.csv_row("x").rfind("x,0,100,", 0) == 0);
}
