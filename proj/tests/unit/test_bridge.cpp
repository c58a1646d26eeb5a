#include <doctest.h>

#include <cstring>

#include "oracle_predictor.hpp"
#include "oracles.hpp"
#include "sparsebridge/bridge.hpp"
#include "sparsebridge/errors.hpp"

using namespace sparsebridge;

namespace {

struct Instance {
    Tensor x0, y, eps;
};

Instance random_instance(Rng &rng, int n = 1, int size = 8) {
    return {oracle::uniform_tensor({n, 1, size, size}, rng), oracle::uniform_tensor({n, 1, size, size}, rng),
            oracle::random_tensor({n, 1, size, size}, rng)};
}

Tensor forward_with(const BridgeSchedule &s, const Tensor &x0, const Tensor &y, int t, const Tensor &eps) {
    Tensor x(x0.shape());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = (1 - s.m[t]) * x0[i] + s.m[t] * y[i] + std::sqrt(s.delta[t]) * eps[i];
    return x;
}

bool bit_equal(const Tensor &a, const Tensor &b) {
    return a.same_shape(b) && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

} // namespace

TEST_CASE("sample_forward") {
    const auto s = build_schedule(4, 1.0);
    Rng rng(1);
    const Tensor x0({2, 2}, 0.0), y({2, 2}, 1.0);
    auto f = sample_forward(s, x0, y, 1, rng);
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(f.x_t[i] - (0.25 + std::sqrt(s.delta[1]) * f.eps[i])) < 1e-15);
    CHECK(bit_equal(sample_forward(s, x0, y, 0, rng).x_t, x0));
    CHECK(bit_equal(sample_forward(s, x0, y, 4, rng).x_t, y));
    CHECK_THROWS_AS(sample_forward(s, x0, Tensor({2, 3}), 1, rng), InvalidArgument);
    Rng a(9), b(9);
    CHECK(bit_equal(sample_forward(s, x0, y, 2, a).x_t, sample_forward(s, x0, y, 2, b).x_t));
}

TEST_CASE("directional and raw targets") {
    const auto s = build_schedule(4, 1.0); // m_2 = 0.5
    const Tensor x0({1, 2}, std::vector<double>{0, 0}), y({1, 2}, std::vector<double>{3, 4}), zero({1, 2});
    const auto d = directional_noise(s, x0, y, 2, zero, 1e-12);
    CHECK(std::abs(d[0] - 0.3) < 1e-10);
    CHECK(std::abs(d[1] - 0.4) < 1e-10);
    const auto r = raw_noise(s, x0, y, 2, zero);
    CHECK(r[0] == 1.5);
    CHECK(r[1] == 2.0);

    Rng rng(2);
    const Tensor e = oracle::random_tensor({1, 2}, rng);
    const auto same = directional_noise(s, y, y, 3, e);
    for (int i = 0; i < 2; ++i) CHECK(same[i] == std::sqrt(s.delta[3]) * e[i]);
    const auto same_raw = raw_noise(s, y, y, 3, e);
    for (int i = 0; i < 2; ++i) CHECK(same_raw[i] == std::sqrt(s.delta[3]) * e[i]);
}

TEST_CASE("target norm bounds and parallel deterministic parts") {
    const auto s = build_schedule(20, 1.0);
    Rng rng(3);
    for (int k = 0; k < 50; ++k) {
        const auto inst = random_instance(rng, 3);
        const int t = static_cast<int>(rng.integer(0, 20));
        const Tensor zero(inst.x0.shape());
        const auto u = directional_noise(s, inst.x0, inst.y, t, zero, 1e-3);
        const auto r = raw_noise(s, inst.x0, inst.y, t, zero);
        for (int n = 0; n < 3; ++n) {
            const double un = l2_norm(u.sample(n)), rn = l2_norm(r.sample(n));
            CHECK(un <= s.m[t] + 1e-12);
            double dn = 0;
            for (std::size_t i = 0; i < 64; ++i) dn += std::pow(inst.y[n * 64 + i] - inst.x0[n * 64 + i], 2);
            dn = std::sqrt(dn);
            CHECK(std::abs(rn - s.m[t] * dn) < 1e-12);
            // u = r / (||y - x0|| + c) elementwise.
            for (std::size_t i = 0; i < 64; ++i) CHECK(std::abs(u[n * 64 + i] - r[n * 64 + i] / (dn + 1e-3)) < 1e-12);
        }
    }
}

TEST_CASE("training loss with oracle and zero predictors") {
    const auto s = build_schedule(100, 1.0);
    Rng rng(4);
    const auto inst = random_instance(rng, 4);
    const PairBatch batch{inst.x0, inst.y};
    for (auto kind : {ObjectiveKind::raw, ObjectiveKind::unitized}) {
        const oracle::OraclePredictor oracle_model(s, inst.x0, inst.y, kind);
        Rng r(5);
        CHECK(training_loss(oracle_model, batch, s, kind, r) < 1e-24);
    }

    // Zero predictor with x0 = y at fixed t: E[(sqrt(delta) eps)^2] = delta_t per element.
    struct Zero : NoisePredictor {
        ag::Var forward(const Tensor &x, std::span<const int>, const Tensor *) const override { return ag::constant(Tensor(x.shape())); }
    } zero;
    const Tensor big = oracle::uniform_tensor({8, 1, 32, 32}, rng);
    Rng r(6);
    LossOptions lo;
    lo.fixed_t = 30;
    const double loss = training_loss(zero, {big, big}, s, ObjectiveKind::unitized, r, nullptr, lo);
    CHECK(std::abs(loss - s.delta[30]) < 0.05 * s.delta[30]);

    for (int k = 0; k < 10; ++k) {
        const double l = training_loss(zero, batch, s, ObjectiveKind::raw, r);
        CHECK(std::isfinite(l));
        CHECK(l >= 0.0);
    }
    CHECK_THROWS_AS(training_loss(zero, PairBatch{}, s, ObjectiveKind::raw, r), InvalidArgument);
}

TEST_CASE("training loss is bit-reproducible and gradient-checked") {
    const auto s = build_schedule(50, 1.0);
    Rng init(7);
    DenoiserSpec spec{8, 2, 1, 4};
    Denoiser model(spec, init);
    Rng data_rng(8);
    const auto inst = random_instance(data_rng, 2);
    const PairBatch batch{inst.x0, inst.y};

    Rng r1(11), r2(11);
    LossOptions no_bp;
    no_bp.backprop = false;
    CHECK(training_loss(model, batch, s, ObjectiveKind::unitized, r1, nullptr, no_bp) ==
          training_loss(model, batch, s, ObjectiveKind::unitized, r2, nullptr, no_bp));

    for (auto kind : {ObjectiveKind::unitized, ObjectiveKind::raw}) {
        model.params().zero_grad();
        Rng r(12);
        training_loss(model, batch, s, kind, r);
        auto loss_at = [&] {
            Rng rr(12);
            return training_loss(model, batch, s, kind, rr, nullptr, no_bp);
        };
        Rng pick(13);
        const auto &ps = model.params().list();
        int checked = 0;
        while (checked < 10) {
            const auto &p = ps[pick.integer(0, ps.size() - 1)];
            if (p.var->grad.size() != p.var->value.size()) continue;
            const std::size_t i = pick.integer(0, p.var->value.size() - 1);
            const double analytic = p.var->grad[i];
            const double numeric = oracle::central_diff(loss_at, p.var->value[i], 1e-5);
            CHECK(oracle::rel_err(analytic, numeric, 1e-7) < 1e-3);
            ++checked;
        }
    }
}

TEST_CASE("estimate_x0 round trip") {
    const auto s = build_schedule(1000, 1.0);
    Rng rng(14);
    double worst = 0;
    int monotone = 0;
    for (int k = 0; k < 100; ++k) {
        const auto inst = random_instance(rng);
        const int t = static_cast<int>(rng.integer(1, 999));
        const Tensor x_t = forward_with(s, inst.x0, inst.y, t, inst.eps);
        const Tensor eps_hat = directional_noise(s, inst.x0, inst.y, t, inst.eps);
        worst = std::max(worst, max_abs_diff(estimate_x0(s, x_t, inst.y, eps_hat, t), inst.x0));
        const double e1 = max_abs_diff(estimate_x0(s, x_t, inst.y, eps_hat, t, 1e-8, 1), inst.x0);
        const double e3 = max_abs_diff(estimate_x0(s, x_t, inst.y, eps_hat, t, 1e-8, 3), inst.x0);
        if (e3 <= e1 + 1e-15) ++monotone;
    }
    CHECK(worst < 1e-4);
    CHECK(monotone >= 95);
}

TEST_CASE("estimate_x0 degenerate and error cases") {
    const auto s = build_schedule(10, 1.0);
    Rng rng(15);
    const auto inst = random_instance(rng);
    const Tensor x_t = forward_with(s, inst.y, inst.y, 4, inst.eps);
    Tensor eps_hat = inst.eps * std::sqrt(s.delta[4]);
    CHECK(max_abs_diff(estimate_x0(s, x_t, inst.y, eps_hat, 4), inst.y) < 1e-12);
    CHECK_THROWS_AS(estimate_x0(s, x_t, inst.y, eps_hat, 0), InvalidArgument);
    CHECK_THROWS_AS(estimate_x0(s, x_t, inst.y, eps_hat, 10), InvalidArgument);
    CHECK_THROWS_AS(estimate_x0(s, x_t, inst.y, eps_hat, 3, 1e-8, 0), InvalidArgument);

    const Tensor raw = raw_noise(s, inst.x0, inst.y, 6, inst.eps);
    CHECK(max_abs_diff(estimate_x0_raw(forward_with(s, inst.x0, inst.y, 6, inst.eps), raw), inst.x0) < 1e-12);
}

TEST_CASE("reverse_step against the chain oracle") {
    const int T = 12;
    const auto s = build_schedule(T, 1.0);
    const oracle::ScalarChain chain(T, 1.0);
    Rng rng(16);
    for (int k = 0; k < 200; ++k) {
        const int t = static_cast<int>(rng.integer(2, T - 1));
        const Tensor x0({1}, rng.normal()), y({1}, rng.normal()), xt({1}, rng.normal());
        const auto [mu, var] = chain.posterior(t, xt[0], x0[0], y[0]);
        Rng unused(0);
        const auto mean = reverse_step(s, xt, y, x0, t, t - 1, unused, true);
        CHECK(std::abs(mean[0] - mu) < 1e-8);
        const std::uint64_t seed = rng.next_u64();
        Rng a(seed), b(seed);
        const auto draw = reverse_step(s, xt, y, x0, t, t - 1, a, false);
        const double z = b.normal();
        CHECK(std::abs(draw[0] - mean[0] - std::sqrt(var) * z) < 1e-8);
    }
}

TEST_CASE("reverse_step endpoints and fixed point") {
    const auto s = build_schedule(10, 1.0);
    Rng rng(17);
    const auto inst = random_instance(rng);
    CHECK(bit_equal(reverse_step(s, inst.y, inst.y, inst.x0, 5, 0, rng), inst.x0));
    const auto same = reverse_step(s, inst.y, inst.y, inst.y, 7, 3, rng, true);
    CHECK(max_abs_diff(same, inst.y) < 1e-14);
    CHECK_THROWS_AS(reverse_step(s, inst.y, inst.y, inst.y, 3, 3, rng), InvalidArgument);
    CHECK_THROWS_AS(reverse_step(s, inst.y, inst.y, inst.y, 11, 3, rng), InvalidArgument);
    CHECK_THROWS_AS(reverse_step(s, inst.y, inst.y, inst.y, 3, -1, rng), InvalidArgument);
    // From t = T the two-point posterior is the marginal at t_lo.
    Rng u(0);
    const auto from_top = reverse_step(s, inst.y, inst.y, inst.x0, 10, 4, u, true);
    for (std::size_t i = 0; i < 64; ++i) CHECK(std::abs(from_top[i] - (0.6 * inst.x0[i] + 0.4 * inst.y[i])) < 1e-14);
}

TEST_CASE("step grid") {
    CHECK(step_grid(1000, 100).front() == 1000);
    CHECK(step_grid(1000, 100)[1] == 990);
    CHECK(step_grid(1000, 100).back() == 0);
    CHECK(step_grid(10, 3) == std::vector<int>{10, 6, 3, 0});
    CHECK_THROWS_AS(step_grid(10, 0), InvalidArgument);
    CHECK_THROWS_AS(step_grid(10, 11), InvalidArgument);
}

TEST_CASE("oracle sampling recovers x0") {
    const int T = 200;
    const auto s = build_schedule(T, 1.0);
    Rng rng(18);
    const auto inst = random_instance(rng, 4);
    for (auto kind : {ObjectiveKind::unitized, ObjectiveKind::raw}) {
        const oracle::OraclePredictor model(s, inst.x0, inst.y, kind);
        SamplerOptions full;
        full.num_steps = T;
        full.objective = kind;
        Rng r(19);
        const auto out = sample(model, s, inst.y, full, r);
        CHECK(max_abs_diff(out, inst.x0) < 1e-3);

        SamplerOptions strided = full;
        strided.num_steps = T / 10;
        Rng r2(19);
        const auto out2 = sample(model, s, inst.y, strided, r2);
        CHECK(mean_abs_diff(out2, inst.x0) < 0.05);
    }
}

TEST_CASE("sampler output range, determinism and errors") {
    const auto s = build_schedule(100, 1.0);
    Rng init(20);
    Denoiser model(DenoiserSpec{8, 2, 1, 4}, init);
    Rng rng(21);
    const auto inst = random_instance(rng, 3);
    SamplerOptions opts;
    opts.num_steps = 10;
    Rng a(22), b(22);
    const auto o1 = sample(model, s, inst.y, opts, a);
    const auto o2 = sample(model, s, inst.y, opts, b);
    CHECK(bit_equal(o1, o2));
    for (double v : o1.values()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    std::vector<Rng> per{Rng(1), Rng(2), Rng(3)};
    CHECK_NOTHROW(sample(model, s, inst.y, opts, std::span<Rng>(per)));
    opts.num_steps = 0;
    CHECK_THROWS_AS(sample(model, s, inst.y, opts, a), InvalidArgument);
    opts.num_steps = 101;
    CHECK_THROWS_AS(sample(model, s, inst.y, opts, a), InvalidArgument);
}

TEST_CASE("objective names") {
    CHECK(parse_objective("raw") == ObjectiveKind::raw);
    CHECK(parse_objective(to_string(ObjectiveKind::unitized)) == ObjectiveKind::unitized);
    CHECK_THROWS_AS(parse_objective("l2"), InvalidArgument);
}
