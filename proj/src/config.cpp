#include "sparsebridge/config.hpp"

#include <cstdio>
#include <fstream>

#include "sparsebridge/errors.hpp"
#include "sparsebridge/rng.hpp"

namespace sparsebridge {

using nlohmann::json;

namespace {

bool same_kind(const json &a, const json &b) {
    if (a.is_number() && b.is_number()) return !(a.is_number_integer() || a.is_number_unsigned()) || b.is_number_integer() || b.is_number_unsigned();
    return a.type() == b.type();
}

void check_keys(const json &given, const json &defaults, const std::string &prefix) {
    for (auto it = given.begin(); it != given.end(); ++it) {
        const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (!defaults.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
        const json &d = defaults.at(it.key());
        if (!same_kind(d, *it)) throw ConfigError("config key '" + key + "' expects a " + std::string(d.type_name()) + " value");
        if (d.is_object()) check_keys(*it, d, key);
    }
}

// Reads a dotted key; missing keys and conversion failures are ConfigErrors.
class Reader {
  public:
    explicit Reader(const json &root) : root_(root) {}

    template <class T> T get(const std::string &dotted) const {
        const json *node = &root_;
        std::size_t start = 0;
        while (true) {
            const std::size_t dot = dotted.find('.', start);
            const std::string part = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
            if (!node->is_object() || !node->contains(part)) throw ConfigError("missing config key '" + dotted + "'");
            node = &node->at(part);
            if (dot == std::string::npos) break;
            start = dot + 1;
        }
        try {
            return node->get<T>();
        } catch (const json::exception &) {
            throw ConfigError("config key '" + dotted + "' has the wrong type");
        }
    }

  private:
    const json &root_;
};

json phantom_json(const PhantomParams &p) {
    return {{"n_subjects", p.n_subjects},
            {"slices_per_subject", p.slices_per_subject},
            {"image_size", p.image_size},
            {"n_families", p.n_families},
            {"intensity_jitter", p.intensity_jitter},
            {"subject_texture", p.subject_texture},
            {"slice_gain_jitter", p.slice_gain_jitter},
            {"slice_bias_field", p.slice_bias_field}};
}

} // namespace

json ExperimentConfig::to_json() const {
    json j;
    j["seed"] = seed;
    j["corpus"] = phantom_json(corpus.phantom);
    j["corpus"]["n_eval"] = corpus.n_eval;
    j["bridge"] = {{"T", bridge.T},
                   {"s", bridge.s},
                   {"objective", to_string(bridge.objective)},
                   {"eps_const", bridge.eps_const},
                   {"base_channels", bridge.denoiser.base_channels},
                   {"depth", bridge.denoiser.depth},
                   {"time_embed_dim", bridge.denoiser.time_embed_dim},
                   {"iters", bridge.iters},
                   {"batch_size", bridge.batch_size},
                   {"lr", bridge.lr}};
    j["sampler"] = {{"steps", sampler.steps}, {"x0_iters", sampler.x0_iters}, {"deterministic", sampler.deterministic}};
    j["retriever"] = {{"base_channels", retriever.encoder.base_channels},
                      {"stages", retriever.encoder.stages},
                      {"embed_dim", retriever.encoder.embed_dim},
                      {"feature_tap", retriever.encoder.feature_tap},
                      {"iters", retriever.iters},
                      {"batch_size", retriever.batch_size},
                      {"position_spread", retriever.position_spread},
                      {"alpha", retriever.alpha},
                      {"beta", retriever.beta},
                      {"lambda", retriever.lambda},
                      {"offsets", retriever.offsets},
                      {"lr", retriever.lr}};
    j["tau"] = {{"percentile", tau.percentile}, {"mode", to_string(tau.mode)}};
    j["control"] = {{"slerp_augment_prob", control.slerp_augment_prob},
                    {"max_pos_delta", control.max_pos_delta},
                    {"iters", control.iters},
                    {"batch_size", control.batch_size},
                    {"lr", control.lr}};
    j["reconstruct"] = {{"factor", reconstruct.factor},
                        {"max_pos_delta", reconstruct.max_pos_delta},
                        {"use_control", reconstruct.use_control},
                        {"use_retrieval", reconstruct.use_retrieval},
                        {"retrieve_for_direct", reconstruct.retrieve_for_direct},
                        {"db_fraction", reconstruct.db_fraction}};
    j["gradstats"] = {{"image_size", gradstats.image_size},
                      {"n_subjects", gradstats.n_subjects},
                      {"slices_per_subject", gradstats.slices_per_subject},
                      {"high_jitter", gradstats.high_jitter},
                      {"iters", gradstats.iters},
                      {"batch_size", gradstats.batch_size},
                      {"lr", gradstats.lr},
                      {"window", gradstats.window},
                      {"rel_tol", gradstats.rel_tol},
                      {"base_channels", gradstats.denoiser.base_channels},
                      {"depth", gradstats.denoiser.depth},
                      {"time_embed_dim", gradstats.denoiser.time_embed_dim}};
    return j;
}

ExperimentConfig ExperimentConfig::from_json(const json &given) {
    if (!given.is_object()) throw ConfigError("config must be a JSON object");
    const json defaults = ExperimentConfig{}.to_json();
    check_keys(given, defaults, "");
    json merged = defaults;
    merged.merge_patch(given);
    const Reader r(merged);

    ExperimentConfig c;
    c.seed = r.get<std::uint64_t>("seed");
    auto &p = c.corpus.phantom;
    p.n_subjects = r.get<int>("corpus.n_subjects");
    p.slices_per_subject = r.get<int>("corpus.slices_per_subject");
    p.image_size = r.get<int>("corpus.image_size");
    p.n_families = r.get<int>("corpus.n_families");
    p.intensity_jitter = r.get<double>("corpus.intensity_jitter");
    p.subject_texture = r.get<double>("corpus.subject_texture");
    p.slice_gain_jitter = r.get<double>("corpus.slice_gain_jitter");
    p.slice_bias_field = r.get<double>("corpus.slice_bias_field");
    c.corpus.n_eval = r.get<int>("corpus.n_eval");

    auto &b = c.bridge;
    b.T = r.get<int>("bridge.T");
    b.s = r.get<double>("bridge.s");
    try {
        b.objective = parse_objective(r.get<std::string>("bridge.objective"));
    } catch (const InvalidArgument &e) {
        throw ConfigError(std::string("bridge.objective: ") + e.what());
    }
    b.eps_const = r.get<double>("bridge.eps_const");
    b.denoiser.image_size = p.image_size;
    b.denoiser.base_channels = r.get<int>("bridge.base_channels");
    b.denoiser.depth = r.get<int>("bridge.depth");
    b.denoiser.time_embed_dim = r.get<int>("bridge.time_embed_dim");
    b.iters = r.get<int>("bridge.iters");
    b.batch_size = r.get<int>("bridge.batch_size");
    b.lr = r.get<double>("bridge.lr");

    c.sampler.steps = r.get<int>("sampler.steps");
    c.sampler.x0_iters = r.get<int>("sampler.x0_iters");
    c.sampler.deterministic = r.get<bool>("sampler.deterministic");

    auto &rt = c.retriever;
    rt.encoder.image_size = p.image_size;
    rt.encoder.base_channels = r.get<int>("retriever.base_channels");
    rt.encoder.stages = r.get<int>("retriever.stages");
    rt.encoder.embed_dim = r.get<int>("retriever.embed_dim");
    rt.encoder.feature_tap = r.get<int>("retriever.feature_tap");
    rt.iters = r.get<int>("retriever.iters");
    rt.batch_size = r.get<int>("retriever.batch_size");
    rt.position_spread = r.get<int>("retriever.position_spread");
    rt.alpha = r.get<double>("retriever.alpha");
    rt.beta = r.get<double>("retriever.beta");
    rt.lambda = r.get<double>("retriever.lambda");
    rt.offsets = r.get<std::vector<int>>("retriever.offsets");
    rt.lr = r.get<double>("retriever.lr");

    c.tau.percentile = r.get<double>("tau.percentile");
    try {
        c.tau.mode = parse_tau_mode(r.get<std::string>("tau.mode"));
    } catch (const InvalidArgument &e) {
        throw ConfigError(std::string("tau.mode: ") + e.what());
    }

    c.control.slerp_augment_prob = r.get<double>("control.slerp_augment_prob");
    c.control.max_pos_delta = r.get<long>("control.max_pos_delta");
    c.control.iters = r.get<int>("control.iters");
    c.control.batch_size = r.get<int>("control.batch_size");
    c.control.lr = r.get<double>("control.lr");

    auto &rc = c.reconstruct;
    rc.factor = r.get<int>("reconstruct.factor");
    rc.max_pos_delta = r.get<long>("reconstruct.max_pos_delta");
    rc.use_control = r.get<bool>("reconstruct.use_control");
    rc.use_retrieval = r.get<bool>("reconstruct.use_retrieval");
    rc.retrieve_for_direct = r.get<bool>("reconstruct.retrieve_for_direct");
    rc.db_fraction = r.get<double>("reconstruct.db_fraction");

    auto &g = c.gradstats;
    g.image_size = r.get<int>("gradstats.image_size");
    g.n_subjects = r.get<int>("gradstats.n_subjects");
    g.slices_per_subject = r.get<int>("gradstats.slices_per_subject");
    g.high_jitter = r.get<double>("gradstats.high_jitter");
    g.iters = r.get<int>("gradstats.iters");
    g.batch_size = r.get<int>("gradstats.batch_size");
    g.lr = r.get<double>("gradstats.lr");
    g.window = r.get<int>("gradstats.window");
    g.rel_tol = r.get<double>("gradstats.rel_tol");
    g.denoiser.image_size = g.image_size;
    g.denoiser.base_channels = r.get<int>("gradstats.base_channels");
    g.denoiser.depth = r.get<int>("gradstats.depth");
    g.denoiser.time_embed_dim = r.get<int>("gradstats.time_embed_dim");

    c.validate();
    return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path &path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config " + path.string());
    json j;
    try {
        j = json::parse(f);
    } catch (const json::exception &e) {
        throw ConfigError("malformed config " + path.string() + ": " + e.what());
    }
    return from_json(j);
}

void ExperimentConfig::save(const std::filesystem::path &path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot write config " + path.string());
    f << to_json().dump(2) << "\n";
}

void ExperimentConfig::validate() const {
    auto check = [](bool ok, const std::string &msg) {
        if (!ok) throw ConfigError("invalid config: " + msg);
    };
    try {
        corpus.phantom.validate();
        bridge.denoiser.validate();
        retriever.encoder.validate();
        gradstats.denoiser.validate();
        PositiveSpec{retriever.offsets}.validate();
    } catch (const InvalidArgument &e) {
        throw ConfigError(std::string("invalid config: ") + e.what());
    }
    check(corpus.n_eval >= 1 && corpus.phantom.n_subjects - corpus.n_eval >= 2, "corpus needs >= 1 eval and >= 2 training subjects");
    check(bridge.T >= 2 && bridge.s > 0, "bridge.T >= 2 and bridge.s > 0 required");
    check(bridge.eps_const > 0, "bridge.eps_const must be positive");
    check(bridge.iters >= 1 && bridge.batch_size >= 1 && bridge.lr > 0, "bridge training settings must be positive");
    check(sampler.steps >= 1 && sampler.steps <= bridge.T, "sampler.steps must lie in [1, T]");
    check(sampler.x0_iters >= 1, "sampler.x0_iters must be positive");
    check(retriever.iters >= 1 && retriever.batch_size >= 2 && retriever.lr > 0, "retriever training settings invalid");
    check(retriever.alpha > 0 && retriever.beta > 0 && retriever.lambda >= 0, "retriever alpha, beta > 0 and lambda >= 0 required");
    check(tau.percentile > 0 && tau.percentile < 100, "tau.percentile must lie in (0, 100)");
    check(control.slerp_augment_prob >= 0 && control.slerp_augment_prob <= 1, "control.slerp_augment_prob must lie in [0, 1]");
    check(control.max_pos_delta >= 0 && reconstruct.max_pos_delta >= 0, "max_pos_delta must be non-negative");
    check(control.iters >= 1 && control.batch_size >= 1 && control.lr > 0, "control training settings must be positive");
    check(reconstruct.factor >= 1, "reconstruct.factor must be >= 1");
    check(reconstruct.db_fraction > 0 && reconstruct.db_fraction <= 1, "reconstruct.db_fraction must lie in (0, 1]");
    check(gradstats.n_subjects >= 1 && gradstats.slices_per_subject >= 1, "gradstats corpus must be non-empty");
    check(gradstats.iters >= 1 && gradstats.window >= 1 && gradstats.window <= gradstats.iters, "gradstats.window must lie in [1, iters]");
    check(gradstats.rel_tol > 0 && gradstats.lr > 0 && gradstats.batch_size >= 1, "gradstats training settings must be positive");
}

std::string ExperimentConfig::hash() const {
    const std::string text = to_json().dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::uint64_t ExperimentConfig::stage_seed(const std::string &stage) const {
    std::uint64_t h = 0;
    for (unsigned char ch : stage) h = h * 131 + ch;
    return mix_seed(seed, h);
}

BridgeSchedule ExperimentConfig::schedule() const { return build_schedule(bridge.T, bridge.s); }

SamplerOptions ExperimentConfig::sampler_options() const {
    SamplerOptions o;
    o.num_steps = sampler.steps;
    o.eps_const = bridge.eps_const;
    o.x0_iters = sampler.x0_iters;
    o.deterministic = sampler.deterministic;
    o.objective = bridge.objective;
    return o;
}

RetrieverOptions ExperimentConfig::retriever_options() const {
    RetrieverOptions o;
    o.iters = retriever.iters;
    o.batch_size = retriever.batch_size;
    o.position_spread = retriever.position_spread;
    o.alpha = retriever.alpha;
    o.beta = retriever.beta;
    o.lambda = retriever.lambda;
    o.positives.offsets = retriever.offsets;
    o.adam.lr = retriever.lr;
    o.seed = stage_seed("retriever");
    return o;
}

} // namespace sparsebridge
