#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "sparsebridge/errors.hpp"
#include "sparsebridge/gradstats.hpp"
#include "sparsebridge/schedule.hpp"

using namespace sparsebridge;

namespace {

std::vector<RadialSample> random_samples(Rng &rng, int n, int dim, double r_lo, double r_hi) {
    std::vector<RadialSample> out;
    for (int i = 0; i < n; ++i) {
        RadialSample s;
        s.r = r_lo + (r_hi - r_lo) * rng.uniform();
        s.u = oracle::random_vector(dim, rng);
        const double n2 = oracle::l2(s.u);
        for (auto &x : s.u) x /= n2;
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<RadialSample> scalar_pair() { return {{1.0, {1.0}}, {3.0, {1.0}}}; }

} // namespace

TEST_CASE("scalar worked case") {
    const auto s = scalar_pair();
    const auto m = minimizer_check(s, 0.5, 0.0);
    CHECK(m.f_raw[0] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(m.f_unit[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(m.gap == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(gradient_covariance_closed_form(s, 0.5, 0.0, ObjectiveKind::raw) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(gradient_covariance_closed_form(s, 0.5, 0.0, ObjectiveKind::unitized) == doctest::Approx(0.0));
    CHECK(gradient_covariance(s, 0.5, 0.0, ObjectiveKind::raw, m.f_raw, 100000, 1) == doctest::Approx(1.0).epsilon(0.05));
    CHECK(gradient_covariance(s, 0.5, 0.0, ObjectiveKind::unitized, m.f_unit, 100000, 1) == doctest::Approx(0.0));
}

TEST_CASE("constant radius factorizes the minimizer") {
    Rng rng(4);
    auto s = random_samples(rng, 7, 3, 0, 0);
    for (auto &x : s) x.r = 2.5;
    const auto m = minimizer_check(s, 0.3, 0.1);
    for (int k = 0; k < 3; ++k) CHECK(m.f_raw[k] == doctest::Approx(2.5 * m.f_unit[k]).epsilon(1e-12));
    CHECK(m.gap == doctest::Approx(1.5 * oracle::l2(m.f_unit)).epsilon(1e-12));
    for (auto &x : s) x.r = 1.0;
    CHECK(gradient_covariance_closed_form(s, 0.3, 0.1, ObjectiveKind::raw) ==
          doctest::Approx(gradient_covariance_closed_form(s, 0.3, 0.1, ObjectiveKind::unitized)).epsilon(1e-12));
}

TEST_CASE("minimizers match a brute-force least-squares search") {
    Rng rng(5);
    for (int set = 0; set < 5; ++set) {
        const auto s = random_samples(rng, 6, 2, 0.2, 4.0);
        const double m_t = 0.1 + 0.8 * rng.uniform();
        const auto m = minimizer_check(s, m_t, 0.3);
        for (auto obj : {ObjectiveKind::raw, ObjectiveKind::unitized}) {
            const auto &star = obj == ObjectiveKind::raw ? m.f_raw : m.f_unit;
            // Coordinate-wise search; the risk is separable in the predictor.
            for (int k = 0; k < 2; ++k) {
                auto f = star;
                const double best = oracle::golden_min(
                    [&](double v) {
                        f[k] = v;
                        return constant_predictor_risk(s, m_t, 0.3, obj, f);
                    },
                    -5, 5);
                CHECK(std::abs(best - star[k]) < 1e-6);
            }
        }
    }
}

TEST_CASE("monte carlo covariance matches the closed form") {
    Rng rng(6);
    for (int set = 0; set < 3; ++set) {
        const auto s = random_samples(rng, 5, 3, 0.5, 3.0);
        for (auto obj : {ObjectiveKind::raw, ObjectiveKind::unitized}) {
            const auto m = minimizer_check(s, 0.6, 0.2);
            const double mc = gradient_covariance(s, 0.6, 0.2, obj, obj == ObjectiveKind::raw ? m.f_raw : m.f_unit, 100000, 10 + set);
            CHECK(oracle::rel_err(mc, gradient_covariance_closed_form(s, 0.6, 0.2, obj)) < 0.05);
        }
        CHECK(gradient_covariance_closed_form(s, 0.6, 0.2, ObjectiveKind::raw) >= 0.0);
    }
}

TEST_CASE("raw covariance dominates with fixed direction and varying radius") {
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        auto s = random_samples(rng, 6, 4, 0.5, 3.0);
        for (auto &x : s) x.u = s[0].u;
        CHECK(gradient_covariance_closed_form(s, 0.5, 0.1, ObjectiveKind::raw) >=
              gradient_covariance_closed_form(s, 0.5, 0.1, ObjectiveKind::unitized));
    }
}

TEST_CASE("gradstats errors") {
    CHECK_THROWS_AS(minimizer_check({{1.0, {1.0}}}, 0.5, 0.0), InvalidArgument);
    CHECK_THROWS_AS(minimizer_check({{1.0, {1.0}}, {-1.0, {1.0}}}, 0.5, 0.0), InvalidArgument);
    CHECK_THROWS_AS(minimizer_check({{1.0, {1.0}}, {1.0, {0.5}}}, 0.5, 0.0), InvalidArgument);
    CHECK_THROWS_AS(gradient_covariance(scalar_pair(), 0.5, 0.0, ObjectiveKind::raw, {1.0}, 10, 0), InvalidArgument);
}

TEST_CASE("radial samples of a pair batch") {
    Rng rng(8);
    PairBatch b{oracle::uniform_tensor({3, 1, 4, 4}, rng), oracle::uniform_tensor({3, 1, 4, 4}, rng)};
    const auto s = radial_samples(b);
    REQUIRE(s.size() == 3);
    for (int i = 0; i < 3; ++i) {
        CHECK_NOTHROW(s[i].validate());
        for (int k = 0; k < 16; ++k) CHECK(s[i].r * s[i].u[k] == doctest::Approx(b.y[i * 16 + k] - b.x0[i * 16 + k]).epsilon(1e-12));
    }
}

TEST_CASE("plateau iteration") {
    std::vector<double> flat(100, 1.0);
    CHECK(plateau_iteration(flat, 10) == 9);
    std::vector<double> decay(200);
    for (int i = 0; i < 200; ++i) decay[i] = 1.0 + 10.0 * std::exp(-i / 10.0);
    const int p = plateau_iteration(decay, 5);
    CHECK(p > 20);
    CHECK(p < 80);
    CHECK_THROWS_AS(plateau_iteration(decay, 0), InvalidArgument);
    CHECK_THROWS_AS(plateau_iteration({1.0, 2.0}, 5), InvalidArgument);
}

TEST_CASE("convergence runs are reproducible") {
    PhantomParams p;
    p.n_subjects = 2;
    p.slices_per_subject = 4;
    p.image_size = 16;
    auto to_batch = [](const std::vector<PairedVolume> &c) {
        std::vector<Tensor> x0, y;
        for (const auto &pv : c)
            for (std::size_t i = 0; i < pv.source.slices.size(); ++i) {
                x0.push_back(pv.target.slices[i].pixels);
                y.push_back(pv.source.slices[i].pixels);
            }
        return PairBatch{stack_slices(x0), stack_slices(y)};
    };
    const auto high = to_batch(generate_corpus(p, 1));
    const auto low = to_batch(generate_corpus(p, 2));
    ConvergenceOptions o;
    o.train.iters = 4;
    o.train.batch_size = 4;
    o.window = 2;
    const auto sched = build_schedule(100);
    const auto a = convergence_experiment(high, low, sched, o), b = convergence_experiment(high, low, sched, o);
    REQUIRE(a.size() == 4);
    CHECK(a[0].corpus == "high");
    CHECK(a[0].objective == ObjectiveKind::raw);
    CHECK(a[3].corpus == "low");
    CHECK(a[3].objective == ObjectiveKind::unitized);
    for (int i = 0; i < 4; ++i) CHECK(a[i].trace == b[i].trace);

    const auto dir = std::filesystem::temp_directory_path() / "sparsebridge_test_traces";
    std::filesystem::create_directories(dir);
    write_traces_csv(dir / "t.csv", a);
    write_traces_svg(dir / "t.svg", a, 2);
    std::ifstream csv(dir / "t.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header.find("high_raw") != std::string::npos);
    CHECK(std::filesystem::file_size(dir / "t.svg") > 100);
    std::filesystem::remove_all(dir);
}
