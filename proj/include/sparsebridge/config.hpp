#pragma once
// Experiment configuration shared by every command: one JSON document with
// documented sections, defaults for every key, and a stable content hash.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "sparsebridge/bridge.hpp"
#include "sparsebridge/data.hpp"
#include "sparsebridge/retrieval.hpp"

namespace sparsebridge {

struct CorpusConfig {
    PhantomParams phantom;
    // The last n_eval subjects are held out for evaluation.
    int n_eval = 6;
};

struct BridgeConfig {
    int T = 1000;
    double s = 1.0;
    ObjectiveKind objective = ObjectiveKind::unitized;
    double eps_const = 1e-8;
    DenoiserSpec denoiser{32, 16, 3, 64};
    int iters = 1500;
    int batch_size = 16;
    double lr = 1e-3;
};

struct SamplerConfig {
    int steps = 100;
    int x0_iters = 3;
    // Posterior mean at every step, the usual DDIM setting. false draws from
    // the posterior instead.
    bool deterministic = true;
};

struct RetrieverConfig {
    EncoderSpec encoder;
    int iters = 1000;
    int batch_size = 12;
    int position_spread = 3;
    double alpha = 1.0;
    double beta = 1.0;
    double lambda = 0.5;
    std::vector<int> offsets{1, 2};
    double lr = 1e-3;
};

struct TauConfig {
    double percentile = 5.0;
    TauMode mode = TauMode::percentile;
};

struct ControlConfig {
    double slerp_augment_prob = 0.25;
    long max_pos_delta = 4;
    int iters = 800;
    int batch_size = 16;
    double lr = 1e-3;
};

struct ReconstructConfig {
    int factor = 2;
    long max_pos_delta = 4;
    bool use_control = true;
    bool use_retrieval = true;
    bool retrieve_for_direct = false;
    // Fraction of training subjects kept in the knowledge base.
    double db_fraction = 1.0;
};

struct GradstatsConfig {
    int image_size = 16;
    int n_subjects = 12;
    int slices_per_subject = 16;
    double high_jitter = 1.0;
    int iters = 1000;
    int batch_size = 16;
    double lr = 1e-3;
    int window = 50;
    double rel_tol = 0.05;
    DenoiserSpec denoiser{16, 8, 2, 32};
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    CorpusConfig corpus;
    BridgeConfig bridge;
    SamplerConfig sampler;
    RetrieverConfig retriever;
    TauConfig tau;
    ControlConfig control;
    ReconstructConfig reconstruct;
    GradstatsConfig gradstats;

    nlohmann::json to_json() const;
    // Missing keys keep their defaults; unknown keys and mistyped values throw
    // ConfigError naming the dotted key.
    static ExperimentConfig from_json(const nlohmann::json &j);
    static ExperimentConfig load(const std::filesystem::path &path);
    void save(const std::filesystem::path &path) const;

    // Throws ConfigError on out-of-range values.
    void validate() const;
    // 16 hex digits over the canonical JSON form.
    std::string hash() const;

    // Per-stage seeds derived from `seed`.
    std::uint64_t stage_seed(const std::string &stage) const;

    BridgeSchedule schedule() const;
    SamplerOptions sampler_options() const;
    RetrieverOptions retriever_options() const;
};

} // namespace sparsebridge
