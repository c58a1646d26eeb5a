#include "sparsebridge/commands.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>

#include "sparsebridge/checkpoint.hpp"
#include "sparsebridge/control.hpp"
#include "sparsebridge/errors.hpp"
#include "sparsebridge/gradstats.hpp"
#include "sparsebridge/metrics.hpp"
#include "sparsebridge/pipeline.hpp"
#include "sparsebridge/retrieval.hpp"

namespace sparsebridge {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void log(const std::string &cmd, const std::string &msg) { std::cerr << "[" << cmd << "] " << msg << std::endl; }

void require_artifact(const fs::path &path, const std::string &producer) {
    if (!fs::exists(path)) throw ConfigError("missing artifact " + path.string() + " (run " + producer + " first)");
}

void write_json(const fs::path &path, const json &j) {
    fs::create_directories(path.parent_path());
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot write " + path.string());
    f << j.dump(2) << "\n";
}

json read_json(const fs::path &path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read " + path.string());
    try {
        return json::parse(f);
    } catch (const json::exception &e) {
        throw ManifestError("malformed " + path.string() + ": " + e.what());
    }
}

void write_trace(const fs::path &path, const std::vector<double> &trace) {
    fs::create_directories(path.parent_path());
    std::ofstream f(path);
    f << "iteration,loss\n";
    char buf[64];
    for (std::size_t i = 0; i < trace.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i, trace[i]);
        f << buf;
    }
}

double tail_mean(const std::vector<double> &trace, std::size_t n) {
    n = std::min(n, trace.size());
    double acc = 0;
    for (std::size_t i = trace.size() - n; i < trace.size(); ++i) acc += trace[i];
    return n ? acc / static_cast<double>(n) : 0.0;
}

std::vector<Volume> sources_of(const std::vector<PairedVolume> &c) {
    std::vector<Volume> out;
    for (const auto &pv : c) out.push_back(pv.source);
    return out;
}

PairBatch dense_pairs(const std::vector<PairedVolume> &c) {
    std::vector<Tensor> x0, y;
    for (const auto &pv : c)
        for (std::size_t i = 0; i < pv.source.slices.size(); ++i) {
            x0.push_back(pv.target.slices[i].pixels);
            y.push_back(pv.source.slices[i].pixels);
        }
    return {stack_slices(x0), stack_slices(y)};
}

struct Paths {
    fs::path root;
    fs::path data() const { return root / "data"; }
    fs::path bridge() const { return root / "models" / "bridge.ckpt"; }
    fs::path encoder() const { return root / "models" / "encoder.ckpt"; }
    fs::path control() const { return root / "models" / "control.ckpt"; }
    fs::path kb() const { return root / "kb"; }
};

Denoiser load_bridge(const Paths &p, const ExperimentConfig &cfg) {
    require_artifact(p.bridge(), "train-bridge");
    const Checkpoint ck = load_checkpoint(p.bridge());
    const auto &extra = ck.config.at("extra");
    if (extra.value("objective", "") != to_string(cfg.bridge.objective) || extra.value("T", 0) != cfg.bridge.T ||
        extra.value("s", 0.0) != cfg.bridge.s)
        throw ConfigError("bridge checkpoint was trained with objective " + extra.value("objective", std::string("?")) +
                          ", T " + std::to_string(extra.value("T", 0)) + "; config asks for " + to_string(cfg.bridge.objective) +
                          ", T " + std::to_string(cfg.bridge.T));
    return Denoiser::from_checkpoint(ck);
}

Encoder load_encoder(const Paths &p) {
    require_artifact(p.encoder(), "train-retriever");
    return Encoder::from_checkpoint(load_checkpoint(p.encoder()));
}

KnowledgeBase load_kb(const Paths &p, bool need_tau) {
    require_artifact(p.kb() / "kb.json", "build-kb");
    auto kb = KnowledgeBase::load(p.kb());
    if (need_tau && !kb.calibrated()) throw ConfigError("knowledge base in " + p.kb().string() + " has no tau (run calibrate-tau first)");
    return kb;
}

// ---------------------------------------------------------------- commands

json gen_data(const ExperimentConfig &cfg, const Paths &p, const CommandArgs &) {
    const auto corpus = generate_corpus(cfg.corpus.phantom, cfg.stage_seed("data"));
    const int n_train = static_cast<int>(corpus.size()) - cfg.corpus.n_eval;
    fs::remove_all(p.data());
    json manifest{{"train", json::array()}, {"eval", json::array()}, {"families", json::object()}};
    for (int i = 0; i < static_cast<int>(corpus.size()); ++i) {
        const auto &pv = corpus[i];
        const std::string split = i < n_train ? "train" : "eval";
        save_volume(pv.source, p.data() / split / pv.source.subject_id / "source");
        save_volume(pv.target, p.data() / split / pv.source.subject_id / "target");
        manifest[split].push_back(pv.source.subject_id);
        manifest["families"][pv.source.subject_id] = pv.family;
    }
    write_json(p.data() / "corpus.json", manifest);
    return {{"train_subjects", n_train},
            {"eval_subjects", cfg.corpus.n_eval},
            {"slices_per_subject", cfg.corpus.phantom.slices_per_subject},
            {"image_size", cfg.corpus.phantom.image_size}};
}

json train_bridge(const ExperimentConfig &cfg, const Paths &p, const CommandArgs &) {
    const auto train = load_split(p.root, "train");
    const PairBatch pairs = dense_pairs(train);
    Rng init(cfg.stage_seed("bridge_init"));
    Denoiser model(cfg.bridge.denoiser, init);
    TrainOptions to;
    to.iters = cfg.bridge.iters;
    to.batch_size = cfg.bridge.batch_size;
    to.adam.lr = cfg.bridge.lr;
    to.eps_const = cfg.bridge.eps_const;
    to.seed = cfg.stage_seed("bridge");
    log("train-bridge", std::to_string(pairs.size()) + " pairs, " + std::to_string(to.iters) + " iterations, objective " +
                            to_string(cfg.bridge.objective));
    const auto trace = fit_noise_predictor(model, model.params(), pairs, nullptr, cfg.schedule(), cfg.bridge.objective, to);
    fs::create_directories(p.bridge().parent_path());
    save_checkpoint(model.to_checkpoint({{"objective", to_string(cfg.bridge.objective)}, {"T", cfg.bridge.T}, {"s", cfg.bridge.s}}),
                    p.bridge());
    write_trace(p.root / "models" / "bridge_loss.csv", trace);
    return {{"pairs", pairs.size()}, {"first_loss", trace.front()}, {"final_loss", tail_mean(trace, 50)}};
}

json train_retriever_cmd(const ExperimentConfig &cfg, const Paths &p, const CommandArgs &) {
    const auto train = sources_of(load_split(p.root, "train"));
    const auto eval = sources_of(load_split(p.root, "eval"));
    Rng init(cfg.stage_seed("encoder_init"));
    Encoder enc(cfg.retriever.encoder, init);
    json out;
    if (eval.size() >= 2) out["untrained_accuracy"] = retrieval_accuracy(enc, eval);
    log("train-retriever", std::to_string(cfg.retriever.iters) + " iterations, lambda " + std::to_string(cfg.retriever.lambda));
    const auto trace = train_retriever(enc, train, cfg.retriever_options());
    fs::create_directories(p.encoder().parent_path());
    save_checkpoint(enc.to_checkpoint(), p.encoder());
    write_trace(p.root / "models" / "retriever_loss.csv", trace);
    if (eval.size() >= 2) out["trained_accuracy"] = retrieval_accuracy(enc, eval);
    out["first_loss"] = trace.front();
    out["final_loss"] = tail_mean(trace, 50);
    return out;
}

json build_kb_cmd(const ExperimentConfig &, const Paths &p, const CommandArgs &) {
    const Encoder enc = load_encoder(p);
    const auto kb = build_kb(enc, sources_of(load_split(p.root, "train")));
    fs::remove_all(p.kb());
    kb.save(p.kb());
    return {{"rows", kb.rows()}, {"embed_dim", kb.embed_dim()}};
}

json calibrate_tau_cmd(const ExperimentConfig &cfg, const Paths &p, const CommandArgs &) {
    const Encoder enc = load_encoder(p);
    auto kb = load_kb(p, false);
    std::vector<Slice> queries;
    for (const auto &pv : load_split(p.root, "train"))
        queries.insert(queries.end(), pv.source.slices.begin(), pv.source.slices.end());
    const auto scores = best_match_scores(enc, kb, queries);
    const double tau = tau_from_scores(scores, cfg.tau.percentile, cfg.tau.mode);
    kb.set_tau(tau);
    kb.save(p.kb());
    std::size_t hits = 0;
    for (double s : scores) hits += s >= tau;
    return {{"tau", tau},
            {"mode", to_string(cfg.tau.mode)},
            {"percentile", cfg.tau.percentile},
            {"queries", scores.size()},
            {"calibration_hit_rate", static_cast<double>(hits) / static_cast<double>(scores.size())}};
}

json train_control_cmd(const ExperimentConfig &cfg, const Paths &p, const CommandArgs &) {
    Denoiser backbone = load_bridge(p, cfg);
    const Encoder enc = load_encoder(p);
    const auto kb = load_kb(p, true);
    const auto train = load_split(p.root, "train");
    PairOptions po;
    po.slerp_augment_prob = cfg.control.slerp_augment_prob;
    po.max_pos_delta = cfg.control.max_pos_delta;
    Rng rng(cfg.stage_seed("pairs"));
    const PairSet set = make_control_pairs(train, enc, kb, po, rng);
    if (set.pairs.empty())
        throw ConfigError("no control training pairs: every retrieval fell below tau (lower tau.percentile strictness)");
    ControlBranch branch(backbone);
    TrainOptions to;
    to.iters = cfg.control.iters;
    to.batch_size = cfg.control.batch_size;
    to.adam.lr = cfg.control.lr;
    to.eps_const = cfg.bridge.eps_const;
    to.seed = cfg.stage_seed("control");
    log("train-control", std::to_string(set.pairs.size()) + " pairs, " + std::to_string(to.iters) + " iterations");
    const auto res = train_control(backbone, branch, set.pairs, cfg.schedule(), cfg.bridge.objective, to);
    save_checkpoint(branch.to_checkpoint(), p.control());
    write_trace(p.root / "models" / "control_loss.csv", res.trace);
    int augmented = 0;
    for (const auto &pr : set.pairs) augmented += pr.augmented;
    return {{"pairs", set.pairs.size()},
            {"augmented", augmented},
            {"skipped_miss", set.skipped_miss},
            {"skipped_no_candidate", set.skipped_no_candidate},
            {"backbone_unchanged", res.backbone_hash_before == res.backbone_hash_after},
            {"first_loss", res.trace.front()},
            {"final_loss", tail_mean(res.trace, 50)}};
}

json reconstruct_cmd(const ExperimentConfig &cfg, const Paths &p, const CommandArgs &) {
    const auto &rc = cfg.reconstruct;
    const Denoiser backbone = load_bridge(p, cfg);
    std::optional<ControlBranch> branch;
    if (rc.use_control) {
        require_artifact(p.control(), "train-control");
        branch = ControlBranch::from_checkpoint(load_checkpoint(p.control()));
    }
    KnowledgeBase kb;
    std::optional<Encoder> enc;
    std::vector<PairedVolume> train;
    json db;
    if (rc.use_retrieval) {
        enc = load_encoder(p);
        kb = load_kb(p, true);
        train = load_split(p.root, "train");
        if (rc.db_fraction < 1.0) {
            std::vector<std::string> keep;
            for (int i : nested_subset(static_cast<int>(train.size()), rc.db_fraction, cfg.stage_seed("db")))
                keep.push_back(train[i].source.subject_id);
            kb = kb.restrict_to(keep);
            db["subjects"] = keep;
        }
        db["rows"] = kb.rows();
    } else {
        Rng unused(0);
        enc.emplace(cfg.retriever.encoder, unused);
    }
    const SliceLibrary library(train);
    PlanOptions po;
    po.max_pos_delta = rc.max_pos_delta;
    po.use_retrieval = rc.use_retrieval;
    po.retrieve_for_direct = rc.retrieve_for_direct;

    const std::string name = reconstruction_name(rc);
    const fs::path out_dir = p.root / name;
    fs::remove_all(out_dir);
    const auto eval = load_split(p.root, "eval");
    const auto sched = cfg.schedule();
    const auto so = cfg.sampler_options();
    json per_subject = json::array();
    int retrieved = 0, missing = 0;
    for (std::size_t k = 0; k < eval.size(); ++k) {
        const Volume sparse = sparsify(eval[k].source, rc.factor);
        const auto plan = plan_reconstruction(sparse, kb, *enc, library, dense_grid(sparse), po);
        plan.validate(dense_grid(sparse));
        log("reconstruct", sparse.subject_id + ": " + std::to_string(plan.count(Directive::retrieved)) + " retrieved, " +
                               std::to_string(plan.count(Directive::interpolated)) + " interpolated");
        const Volume vol = reconstruct_volume(plan, backbone, branch ? &*branch : nullptr, sched, so,
                                              mix_seed(cfg.stage_seed("sample"), k));
        save_volume(vol, out_dir / sparse.subject_id / "volume");
        write_json(out_dir / sparse.subject_id / "plan.json", plan.to_json());
        retrieved += plan.count(Directive::retrieved);
        missing += plan.count(Directive::retrieved) + plan.count(Directive::interpolated);
        per_subject.push_back({{"subject_id", sparse.subject_id}, {"hit_rate", plan.hit_rate()}});
    }
    return {{"variant", name},
            {"volumes", eval.size()},
            {"hit_rate", missing ? static_cast<double>(retrieved) / missing : 0.0},
            {"subjects", per_subject},
            {"database", db}};
}

json report_json(const std::vector<std::pair<std::string, MetricsReport>> &reports, const std::string &key) {
    json subjects = json::array();
    double n = 0, p = 0, s = 0, i = 0;
    for (const auto &[sid, r] : reports) {
        json j = r.to_json();
        j["subject_id"] = sid;
        subjects.push_back(std::move(j));
        n += r.nrmse;
        p += r.psnr;
        s += r.ssim;
        i += r.issim;
    }
    const double c = static_cast<double>(reports.size());
    return {{key, {{"nrmse", n / c}, {"psnr", p / c}, {"ssim", s / c}, {"issim", i / c}}}, {"subjects", subjects}};
}

json evaluate_cmd(const ExperimentConfig &cfg, const Paths &p, const CommandArgs &args) {
    if (args.pred || args.truth) {
        if (!args.pred || !args.truth) throw ConfigError("evaluate needs both --pred and --truth");
        const Volume pred = load_volume(*args.pred), truth = load_volume(*args.truth);
        const auto r = evaluate_volume(pred, truth);
        json out = r.to_json();
        out.erase("slice_ssim");
        out.erase("slice_psnr");
        return out;
    }
    const std::string name = reconstruction_name(cfg.reconstruct);
    const auto eval = load_split(p.root, "eval");
    std::vector<std::pair<std::string, MetricsReport>> recon, nearest;
    for (const auto &pv : eval) {
        const fs::path dir = p.root / name / pv.target.subject_id / "volume";
        require_artifact(dir / "manifest.json", "reconstruct");
        const Volume pred = load_volume(dir);
        recon.emplace_back(pv.target.subject_id, evaluate_volume(pred, pv.target));
        // Baseline: the same translated direct slices, duplicated into the gaps.
        const Volume nn = nearest_neighbor_fill(sparsify(pred, cfg.reconstruct.factor), dense_grid(pred));
        nearest.emplace_back(pv.target.subject_id, evaluate_volume(nn, pv.target));
    }
    json out = report_json(recon, "mean");
    out["variant"] = name;
    out["nearest_neighbor"] = report_json(nearest, "mean").at("mean");
    write_json(p.root / "reports" / (name + ".json"), out);
    std::ofstream csv(p.root / "reports" / (name + ".csv"));
    csv << MetricsReport::csv_header() << "\n";
    for (const auto &[sid, r] : recon) csv << r.csv_row(sid) << "\n";
    for (const auto &[sid, r] : nearest) csv << r.csv_row(sid + "_nearest") << "\n";
    return {{"variant", name}, {"mean", out["mean"]}, {"nearest_neighbor", out["nearest_neighbor"]}};
}

json gradstats_cmd(const ExperimentConfig &cfg, const Paths &p, const CommandArgs &) {
    const auto &g = cfg.gradstats;
    PhantomParams high;
    high.n_subjects = g.n_subjects;
    high.slices_per_subject = g.slices_per_subject;
    high.image_size = g.image_size;
    high.intensity_jitter = g.high_jitter;
    PhantomParams low = high;
    low.intensity_jitter = 0;
    low.slice_gain_jitter = 0;
    low.slice_bias_field = 0;
    const std::uint64_t seed = cfg.stage_seed("gradstats_data");
    const PairBatch hi = dense_pairs(generate_corpus(high, seed)), lo = dense_pairs(generate_corpus(low, seed));

    json radial;
    for (const auto &[name, batch] : {std::pair<const char *, const PairBatch *>{"high", &hi}, {"low", &lo}}) {
        const auto rs = radial_samples(*batch);
        double m = 0, v = 0;
        for (const auto &s : rs) m += s.r;
        m /= static_cast<double>(rs.size());
        for (const auto &s : rs) v += (s.r - m) * (s.r - m);
        v /= static_cast<double>(rs.size());
        radial[name] = {{"r_mean", m},
                        {"r_var", v},
                        {"cov_trace_raw", gradient_covariance_closed_form(rs, 0.5, 0.0, ObjectiveKind::raw)},
                        {"cov_trace_unitized", gradient_covariance_closed_form(rs, 0.5, 0.0, ObjectiveKind::unitized)}};
    }

    ConvergenceOptions co;
    co.denoiser = g.denoiser;
    co.train.iters = g.iters;
    co.train.batch_size = g.batch_size;
    co.train.adam.lr = g.lr;
    co.train.eps_const = cfg.bridge.eps_const;
    co.train.seed = cfg.stage_seed("gradstats_train");
    co.init_seed = cfg.stage_seed("gradstats_init");
    co.window = g.window;
    co.rel_tol = g.rel_tol;
    log("gradstats", "4 runs x " + std::to_string(g.iters) + " iterations");
    const auto runs = convergence_experiment(hi, lo, cfg.schedule(), co);
    fs::create_directories(p.root / "gradstats");
    write_traces_csv(p.root / "gradstats" / "traces.csv", runs);
    write_traces_svg(p.root / "gradstats" / "traces.svg", runs, g.window);
    json plateaus;
    for (const auto &r : runs) plateaus[r.corpus + "_" + to_string(r.objective)] = r.plateau;
    const json out{{"radial", radial}, {"plateau", plateaus}};
    write_json(p.root / "gradstats" / "summary.json", out);
    return out;
}

using Handler = std::function<json(const ExperimentConfig &, const Paths &, const CommandArgs &)>;

const std::map<std::string, Handler> &handlers() {
    static const std::map<std::string, Handler> h{{"gen-data", gen_data},
                                                  {"train-bridge", train_bridge},
                                                  {"train-retriever", train_retriever_cmd},
                                                  {"build-kb", build_kb_cmd},
                                                  {"calibrate-tau", calibrate_tau_cmd},
                                                  {"train-control", train_control_cmd},
                                                  {"reconstruct", reconstruct_cmd},
                                                  {"evaluate", evaluate_cmd},
                                                  {"gradstats", gradstats_cmd}};
    return h;
}

} // namespace

const std::vector<std::string> &command_names() {
    static const std::vector<std::string> names{"gen-data",      "train-bridge",  "train-retriever",
                                                "build-kb",      "calibrate-tau", "train-control",
                                                "reconstruct",   "evaluate",      "gradstats"};
    return names;
}

std::string reconstruction_name(const ReconstructConfig &rc) {
    std::string name = "recon";
    if (!rc.use_control) name += "_uncontrolled";
    if (!rc.use_retrieval) name += "_interp";
    if (rc.use_retrieval && rc.db_fraction < 1.0) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "_db%03d", static_cast<int>(std::lround(rc.db_fraction * 100)));
        name += buf;
    }
    return name;
}

std::vector<PairedVolume> load_split(const fs::path &run_dir, const std::string &split) {
    const fs::path manifest = run_dir / "data" / "corpus.json";
    require_artifact(manifest, "gen-data");
    const json m = read_json(manifest);
    if (!m.contains(split)) throw ManifestError("corpus manifest has no split '" + split + "'");
    std::vector<PairedVolume> out;
    for (const auto &id : m.at(split)) {
        const std::string sid = id.get<std::string>();
        PairedVolume pv;
        pv.source = load_volume(run_dir / "data" / split / sid / "source");
        pv.target = load_volume(run_dir / "data" / split / sid / "target");
        pv.family = m.at("families").value(sid, 0);
        out.push_back(std::move(pv));
    }
    return out;
}

json run_command(const std::string &name, const ExperimentConfig &config, const fs::path &run_dir, const CommandArgs &args) {
    const auto &h = handlers();
    const auto it = h.find(name);
    if (it == h.end()) throw ConfigError("unknown command '" + name + "'");
    config.validate();
    fs::create_directories(run_dir);
    config.save(run_dir / "config.json");
    json summary{{"command", name}, {"config_hash", config.hash()}, {"seed", config.seed}};
    summary["result"] = it->second(config, Paths{run_dir}, args);
    write_json(run_dir / "logs" / (name + ".json"), summary);
    return summary;
}

} // namespace sparsebridge
