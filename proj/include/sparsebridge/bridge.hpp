#pragma once
// Brownian-bridge forward process, training targets and reverse sampling.
//
// Slice-array arguments are either a single slice ({H,W} or {1,1,H,W}) or an
// NCHW batch; per-slice quantities (norms, directions) are computed per sample.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sparsebridge/nets.hpp"
#include "sparsebridge/optim.hpp"
#include "sparsebridge/rng.hpp"
#include "sparsebridge/schedule.hpp"
#include "sparsebridge/tensor.hpp"

namespace sparsebridge {

enum class ObjectiveKind { raw, unitized };

std::string to_string(ObjectiveKind k);
ObjectiveKind parse_objective(const std::string &s);

struct ForwardSample {
    Tensor x_t;
    Tensor eps;
};

// x_t = (1 - m_t) x0 + m_t y + sqrt(delta_t) eps, eps ~ N(0, I).
ForwardSample sample_forward(const BridgeSchedule &sched, const Tensor &x0, const Tensor &y, int t, Rng &rng);

// m_t (y - x0) / (||y - x0|| + eps_const) + sqrt(delta_t) eps.
Tensor directional_noise(const BridgeSchedule &sched, const Tensor &x0, const Tensor &y, int t, const Tensor &eps,
                         double eps_const = 1e-8);
// m_t (y - x0) + sqrt(delta_t) eps, which equals x_t - x0.
Tensor raw_noise(const BridgeSchedule &sched, const Tensor &x0, const Tensor &y, int t, const Tensor &eps);
Tensor noise_target(ObjectiveKind kind, const BridgeSchedule &sched, const Tensor &x0, const Tensor &y, int t,
                    const Tensor &eps, double eps_const = 1e-8);

// Paired slices stacked as {N,1,H,W}: x0 is the target modality, y the source.
struct PairBatch {
    Tensor x0;
    Tensor y;
    int size() const { return x0.empty() ? 0 : x0.dim(0); }
};

PairBatch gather(const PairBatch &pairs, std::span<const int> idx);
Tensor gather_samples(const Tensor &batch, std::span<const int> idx);

struct LossOptions {
    double eps_const = 1e-8;
    std::optional<int> fixed_t;
    // Accumulate parameter gradients of the returned loss.
    bool backprop = true;
};

// Mean over batch and elements of (target - prediction)^2 with t ~ U{1..T}
// per sample. `control` (one slice per sample) is routed to the predictor.
double training_loss(const NoisePredictor &model, const PairBatch &batch, const BridgeSchedule &sched,
                     ObjectiveKind objective, Rng &rng, const Tensor *control = nullptr, const LossOptions &opts = {});

// Inverts the unitized target for x0 given a prediction at step t in [1, T-1].
// Solves x0 = [x_t - m y - (eps_hat - m u(x0))] / (1 - m) with
// u(x0) = (y - x0) / (||y - x0|| + eps_const). The displacement y - x0 is
// parallel to y - x_t + eps_hat, so only its length is iterated (Newton,
// started from ||y - x_t||).
Tensor estimate_x0(const BridgeSchedule &sched, const Tensor &x_t, const Tensor &y, const Tensor &eps_hat, int t,
                   double eps_const = 1e-8, int iters = 3);
// Raw-objective inversion: the target is x_t - x0.
Tensor estimate_x0_raw(const Tensor &x_t, const Tensor &eps_hat);

// Sample of x_{t_lo} from q(x_{t_lo} | x_{t_hi}, x0_hat, y) for any 0 <= t_lo < t_hi <= T.
Tensor reverse_step(const BridgeSchedule &sched, const Tensor &x_t, const Tensor &y, const Tensor &x0_hat, int t_hi,
                    int t_lo, Rng &rng, bool deterministic = false);
// Per-sample generators: rngs.size() is 1 (shared, consumed in sample order) or the batch size.
Tensor reverse_step(const BridgeSchedule &sched, const Tensor &x_t, const Tensor &y, const Tensor &x0_hat, int t_hi,
                    int t_lo, std::span<Rng> rngs, bool deterministic = false);

// Descending grid T = t_0 > t_1 > ... > t_n = 0 with t_k = T (n - k) / n.
std::vector<int> step_grid(int T, int num_steps);

struct SamplerOptions {
    int num_steps = 100;
    double eps_const = 1e-8;
    int x0_iters = 3;
    bool deterministic = false;
    ObjectiveKind objective = ObjectiveKind::unitized;
};

// Starts at x_T = y and walks the grid; returns the final x0 estimate clipped to [0, 1].
Tensor sample(const NoisePredictor &model, const BridgeSchedule &sched, const Tensor &y, const SamplerOptions &opts,
              std::span<Rng> rngs, const Tensor *control = nullptr);
Tensor sample(const NoisePredictor &model, const BridgeSchedule &sched, const Tensor &y, const SamplerOptions &opts,
              Rng &rng, const Tensor *control = nullptr);

struct TrainOptions {
    int iters = 2000;
    int batch_size = 16;
    AdamOptions adam;
    double eps_const = 1e-8;
    std::uint64_t seed = 0;
};

// Minimizes training_loss over random minibatches, updating `trainable` only.
// `controls`, when given, holds one conditioning slice per pair. Returns the
// per-iteration loss trace.
std::vector<double> fit_noise_predictor(const NoisePredictor &model, ParamStore &trainable, const PairBatch &data,
                                        const Tensor *controls, const BridgeSchedule &sched, ObjectiveKind objective,
                                        const TrainOptions &opts);

} // namespace sparsebridge
