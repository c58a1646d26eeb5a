#include "sparsebridge/bridge.hpp"

#include <algorithm>
#include <cmath>

#include "sparsebridge/errors.hpp"

namespace sparsebridge {

namespace {

void check_step(const BridgeSchedule &sched, int t, const char *what) {
    if (t < 0 || t > sched.T) throw InvalidArgument(std::string(what) + ": step " + std::to_string(t) + " outside [0, T]");
}

void check_same(const Tensor &a, const Tensor &b, const char *what) {
    if (!a.same_shape(b)) throw InvalidArgument(std::string(what) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
}

} // namespace

std::string to_string(ObjectiveKind k) { return k == ObjectiveKind::raw ? "raw" : "unitized"; }

ObjectiveKind parse_objective(const std::string &s) {
    if (s == "raw") return ObjectiveKind::raw;
    if (s == "unitized") return ObjectiveKind::unitized;
    throw InvalidArgument("unknown objective '" + s + "' (expected raw or unitized)");
}

ForwardSample sample_forward(const BridgeSchedule &sched, const Tensor &x0, const Tensor &y, int t, Rng &rng) {
    check_same(x0, y, "sample_forward");
    check_step(sched, t, "sample_forward");
    ForwardSample out{Tensor(x0.shape()), Tensor(x0.shape())};
    rng.fill_normal(out.eps.values());
    const double m = sched.m[t], sd = std::sqrt(sched.delta[t]);
    for (std::size_t i = 0; i < x0.size(); ++i) out.x_t[i] = (1.0 - m) * x0[i] + m * y[i] + sd * out.eps[i];
    return out;
}

Tensor directional_noise(const BridgeSchedule &sched, const Tensor &x0, const Tensor &y, int t, const Tensor &eps,
                         double eps_const) {
    check_same(x0, y, "directional_noise");
    check_same(x0, eps, "directional_noise");
    check_step(sched, t, "directional_noise");
    require(eps_const > 0.0, "directional_noise: eps_const must be positive");
    const double m = sched.m[t], sd = std::sqrt(sched.delta[t]);
    Tensor out(x0.shape());
    const std::size_t per = x0.sample_size();
    for (int n = 0; n < x0.batch(); ++n) {
        const std::size_t off = n * per;
        double sq = 0.0;
        for (std::size_t i = 0; i < per; ++i) {
            const double d = y[off + i] - x0[off + i];
            sq += d * d;
        }
        const double scale = m / (std::sqrt(sq) + eps_const);
        for (std::size_t i = 0; i < per; ++i)
            out[off + i] = scale * (y[off + i] - x0[off + i]) + sd * eps[off + i];
    }
    return out;
}

Tensor raw_noise(const BridgeSchedule &sched, const Tensor &x0, const Tensor &y, int t, const Tensor &eps) {
    check_same(x0, y, "raw_noise");
    check_same(x0, eps, "raw_noise");
    check_step(sched, t, "raw_noise");
    const double m = sched.m[t], sd = std::sqrt(sched.delta[t]);
    Tensor out(x0.shape());
    for (std::size_t i = 0; i < x0.size(); ++i) out[i] = m * (y[i] - x0[i]) + sd * eps[i];
    return out;
}

Tensor noise_target(ObjectiveKind kind, const BridgeSchedule &sched, const Tensor &x0, const Tensor &y, int t,
                    const Tensor &eps, double eps_const) {
    return kind == ObjectiveKind::raw ? raw_noise(sched, x0, y, t, eps) : directional_noise(sched, x0, y, t, eps, eps_const);
}

Tensor gather_samples(const Tensor &batch, std::span<const int> idx) {
    require(batch.rank() == 4, "gather_samples: expected NCHW batch");
    std::vector<int> shape = batch.shape();
    shape[0] = static_cast<int>(idx.size());
    Tensor out(shape);
    const std::size_t per = batch.sample_size();
    for (std::size_t k = 0; k < idx.size(); ++k) {
        require(idx[k] >= 0 && idx[k] < batch.dim(0), "gather_samples: index out of range");
        std::copy_n(batch.data() + idx[k] * per, per, out.data() + k * per);
    }
    return out;
}

PairBatch gather(const PairBatch &pairs, std::span<const int> idx) {
    return {gather_samples(pairs.x0, idx), gather_samples(pairs.y, idx)};
}

double training_loss(const NoisePredictor &model, const PairBatch &batch, const BridgeSchedule &sched,
                     ObjectiveKind objective, Rng &rng, const Tensor *control, const LossOptions &opts) {
    if (batch.size() == 0) throw InvalidArgument("training_loss: empty batch");
    check_same(batch.x0, batch.y, "training_loss");
    require(batch.x0.rank() == 4, "training_loss: batch must be NCHW");
    if (opts.fixed_t) check_step(sched, *opts.fixed_t, "training_loss");

    const int n = batch.size();
    const std::size_t per = batch.x0.sample_size();
    std::vector<int> ts(n);
    Tensor x_t(batch.x0.shape()), target(batch.x0.shape());
    for (int i = 0; i < n; ++i) {
        const int t = opts.fixed_t ? *opts.fixed_t : static_cast<int>(rng.integer(1, sched.T));
        ts[i] = t;
        const Tensor x0 = take_sample(batch.x0, i);
        const Tensor y = take_sample(batch.y, i);
        const auto fwd = sample_forward(sched, x0, y, t, rng);
        const Tensor tgt = noise_target(objective, sched, x0, y, t, fwd.eps, opts.eps_const);
        std::copy_n(fwd.x_t.data(), per, x_t.data() + i * per);
        std::copy_n(tgt.data(), per, target.data() + i * per);
    }

    auto pred = model.forward(x_t, ts, control);
    require(pred->value.same_shape(target), "training_loss: prediction shape " + pred->value.shape_string() +
                                                " differs from input " + target.shape_string());
    const double numel = static_cast<double>(target.size());
    double loss = 0.0;
    Tensor seed(target.shape());
    for (std::size_t i = 0; i < target.size(); ++i) {
        const double r = pred->value[i] - target[i];
        loss += r * r;
        seed[i] = 2.0 * r / numel;
    }
    loss /= numel;
    if (opts.backprop && pred->requires_grad) ag::backward(pred, seed);
    return loss;
}

Tensor estimate_x0(const BridgeSchedule &sched, const Tensor &x_t, const Tensor &y, const Tensor &eps_hat, int t,
                   double eps_const, int iters) {
    if (t < 1 || t > sched.T - 1) throw InvalidArgument("estimate_x0: t must lie in [1, T-1], got " + std::to_string(t));
    require(iters >= 1, "estimate_x0: iters must be >= 1");
    require(eps_const > 0.0, "estimate_x0: eps_const must be positive");
    check_same(x_t, y, "estimate_x0");
    check_same(x_t, eps_hat, "estimate_x0");

    const double m = sched.m[t];
    Tensor out(x_t.shape());
    const std::size_t per = x_t.sample_size();
    for (int n = 0; n < x_t.batch(); ++n) {
        const std::size_t off = n * per;
        // (1 - m) d + m d / (||d|| + c) = w, where d = y - x0 and w = y - x_t + eps_hat.
        double w_sq = 0.0, r0_sq = 0.0;
        for (std::size_t i = 0; i < per; ++i) {
            const double w = y[off + i] - x_t[off + i] + eps_hat[off + i];
            const double r0 = y[off + i] - x_t[off + i];
            w_sq += w * w;
            r0_sq += r0 * r0;
        }
        const double w_norm = std::sqrt(w_sq);
        if (w_norm == 0.0) {
            std::copy_n(y.data() + off, per, out.data() + off);
            continue;
        }
        double rho = std::sqrt(r0_sq);
        for (int k = 0; k < iters; ++k) {
            const double g = (1.0 - m) * rho + m * rho / (rho + eps_const) - w_norm;
            const double dg = (1.0 - m) + m * eps_const / ((rho + eps_const) * (rho + eps_const));
            rho = std::max(0.0, rho - g / dg);
        }
        const double scale = rho / w_norm;
        for (std::size_t i = 0; i < per; ++i) {
            const double w = y[off + i] - x_t[off + i] + eps_hat[off + i];
            out[off + i] = y[off + i] - scale * w;
        }
    }
    return out;
}

Tensor estimate_x0_raw(const Tensor &x_t, const Tensor &eps_hat) {
    check_same(x_t, eps_hat, "estimate_x0_raw");
    return x_t - eps_hat;
}

Tensor reverse_step(const BridgeSchedule &sched, const Tensor &x_t, const Tensor &y, const Tensor &x0_hat, int t_hi,
                    int t_lo, std::span<Rng> rngs, bool deterministic) {
    if (t_lo < 0 || t_hi > sched.T || t_lo >= t_hi)
        throw InvalidArgument("reverse_step: invalid step pair (" + std::to_string(t_hi) + ", " + std::to_string(t_lo) + ")");
    check_same(x_t, y, "reverse_step");
    check_same(x_t, x0_hat, "reverse_step");
    const int batch = x_t.batch();
    require(deterministic || rngs.size() == 1 || static_cast<int>(rngs.size()) == batch,
            "reverse_step: need one generator or one per sample");
    if (t_lo == 0) return x0_hat;

    const double m_lo = sched.m[t_lo], d_lo = sched.delta[t_lo];
    double k = 0.0, var = d_lo, m_hi = sched.m[t_hi];
    if (t_hi < sched.T) {
        const double a = (1.0 - m_hi) / (1.0 - m_lo);
        k = a * d_lo / sched.delta[t_hi];
        var = std::max(0.0, d_lo - k * a * d_lo);
    }
    const double sd = std::sqrt(var);

    Tensor out(x_t.shape());
    const std::size_t per = x_t.sample_size();
    for (int n = 0; n < batch; ++n) {
        Rng *rng = deterministic ? nullptr : &rngs[rngs.size() == 1 ? 0 : n];
        for (std::size_t i = n * per; i < (n + 1) * per; ++i) {
            const double mu_lo = (1.0 - m_lo) * x0_hat[i] + m_lo * y[i];
            const double mu_hi = (1.0 - m_hi) * x0_hat[i] + m_hi * y[i];
            double v = mu_lo + k * (x_t[i] - mu_hi);
            if (rng) v += sd * rng->normal();
            out[i] = v;
        }
    }
    return out;
}

Tensor reverse_step(const BridgeSchedule &sched, const Tensor &x_t, const Tensor &y, const Tensor &x0_hat, int t_hi,
                    int t_lo, Rng &rng, bool deterministic) {
    return reverse_step(sched, x_t, y, x0_hat, t_hi, t_lo, std::span<Rng>(&rng, 1), deterministic);
}

std::vector<int> step_grid(int T, int num_steps) {
    if (num_steps < 1 || num_steps > T)
        throw InvalidArgument("num_steps must lie in [1, T], got " + std::to_string(num_steps));
    std::vector<int> grid(num_steps + 1);
    for (int k = 0; k <= num_steps; ++k)
        grid[k] = static_cast<int>(static_cast<long>(T) * (num_steps - k) / num_steps);
    return grid;
}

Tensor sample(const NoisePredictor &model, const BridgeSchedule &sched, const Tensor &y, const SamplerOptions &opts,
              std::span<Rng> rngs, const Tensor *control) {
    const auto grid = step_grid(sched.T, opts.num_steps);
    require(y.rank() == 4, "sample: y must be an NCHW batch");
    const int n = y.dim(0);
    Tensor x = y;
    Tensor x0_hat = y;
    std::vector<int> ts(n);
    for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
        const int t_hi = grid[k], t_lo = grid[k + 1];
        if (opts.objective == ObjectiveKind::raw) {
            std::fill(ts.begin(), ts.end(), t_hi);
            x0_hat = estimate_x0_raw(x, model.predict(x, ts, control));
        } else if (t_hi < sched.T) {
            // At t = T the unitized target carries only a direction; x0 is unidentifiable, use the prior mean y.
            std::fill(ts.begin(), ts.end(), t_hi);
            x0_hat = estimate_x0(sched, x, y, model.predict(x, ts, control), t_hi, opts.eps_const, opts.x0_iters);
        }
        if (t_lo == 0) break;
        x = reverse_step(sched, x, y, x0_hat, t_hi, t_lo, rngs, opts.deterministic);
    }
    for (auto &v : x0_hat.values()) v = std::clamp(v, 0.0, 1.0);
    return x0_hat;
}

Tensor sample(const NoisePredictor &model, const BridgeSchedule &sched, const Tensor &y, const SamplerOptions &opts,
              Rng &rng, const Tensor *control) {
    return sample(model, sched, y, opts, std::span<Rng>(&rng, 1), control);
}

std::vector<double> fit_noise_predictor(const NoisePredictor &model, ParamStore &trainable, const PairBatch &data,
                                        const Tensor *controls, const BridgeSchedule &sched, ObjectiveKind objective,
                                        const TrainOptions &opts) {
    if (data.size() == 0) throw InvalidArgument("fit_noise_predictor: no training pairs");
    if (controls) require(controls->dim(0) == data.size(), "fit_noise_predictor: one control slice per pair required");
    require(opts.iters >= 1 && opts.batch_size >= 1, "fit_noise_predictor: iters and batch_size must be positive");

    Adam adam(trainable, opts.adam);
    Rng rng(opts.seed);
    std::vector<double> trace;
    trace.reserve(opts.iters);
    std::vector<int> idx(opts.batch_size);
    LossOptions lo;
    lo.eps_const = opts.eps_const;
    for (int it = 0; it < opts.iters; ++it) {
        for (auto &i : idx) i = static_cast<int>(rng.integer(0, data.size() - 1));
        const PairBatch b = gather(data, idx);
        Tensor ctrl;
        if (controls) ctrl = gather_samples(*controls, idx);
        trace.push_back(training_loss(model, b, sched, objective, rng, controls ? &ctrl : nullptr, lo));
        adam.step();
    }
    return trace;
}

} // namespace sparsebridge
