#include "sparsebridge/gradstats.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "sparsebridge/errors.hpp"
#include "sparsebridge/rng.hpp"

namespace sparsebridge {

void RadialSample::validate() const {
    require(r >= 0.0, "RadialSample: r must be non-negative");
    require(!u.empty() && std::abs(l2_norm(u) - 1.0) <= 1e-9, "RadialSample: u must be a unit vector");
}

namespace {

std::size_t check_samples(const std::vector<RadialSample> &samples, std::size_t min_count, const char *what) {
    if (samples.size() < min_count)
        throw InvalidArgument(std::string(what) + ": need at least " + std::to_string(min_count) + " samples");
    const std::size_t dim = samples[0].u.size();
    for (const auto &s : samples) {
        s.validate();
        require(s.u.size() == dim, std::string(what) + ": samples differ in dimension");
    }
    return dim;
}

// Deterministic part of the target: m r u (raw) or m u (unitized).
void target_mean(const RadialSample &s, double m_t, ObjectiveKind k, std::vector<double> &out) {
    const double scale = m_t * (k == ObjectiveKind::raw ? s.r : 1.0);
    for (std::size_t i = 0; i < s.u.size(); ++i) out[i] = scale * s.u[i];
}

} // namespace

MinimizerResult minimizer_check(const std::vector<RadialSample> &samples, double m_t, double s_noise) {
    const std::size_t dim = check_samples(samples, 2, "minimizer_check");
    require(s_noise >= 0.0, "minimizer_check: s_noise must be non-negative");
    MinimizerResult res;
    res.f_raw.assign(dim, 0.0);
    res.f_unit.assign(dim, 0.0);
    const double inv = 1.0 / static_cast<double>(samples.size());
    for (const auto &s : samples)
        for (std::size_t i = 0; i < dim; ++i) {
            res.f_raw[i] += m_t * s.r * s.u[i] * inv;
            res.f_unit[i] += m_t * s.u[i] * inv;
        }
    double g = 0;
    for (std::size_t i = 0; i < dim; ++i) g += (res.f_raw[i] - res.f_unit[i]) * (res.f_raw[i] - res.f_unit[i]);
    res.gap = std::sqrt(g);
    return res;
}

double constant_predictor_risk(const std::vector<RadialSample> &samples, double m_t, double s_noise,
                               ObjectiveKind objective, const std::vector<double> &f) {
    const std::size_t dim = check_samples(samples, 1, "constant_predictor_risk");
    require(f.size() == dim, "constant_predictor_risk: predictor dimension mismatch");
    std::vector<double> t(dim);
    double acc = 0;
    for (const auto &s : samples) {
        target_mean(s, m_t, objective, t);
        for (std::size_t i = 0; i < dim; ++i) acc += (t[i] - f[i]) * (t[i] - f[i]);
    }
    return acc / static_cast<double>(samples.size()) + s_noise * s_noise * static_cast<double>(dim);
}

double gradient_covariance(const std::vector<RadialSample> &samples, double m_t, double s_noise, ObjectiveKind objective,
                           const std::vector<double> &f, long draws, std::uint64_t seed) {
    const std::size_t dim = check_samples(samples, 1, "gradient_covariance");
    require(draws >= 100, "gradient_covariance: need at least 100 draws");
    require(f.size() == dim, "gradient_covariance: predictor dimension mismatch");
    Rng rng(seed);
    std::vector<double> t(dim), sum(dim, 0.0), sq(dim, 0.0);
    for (long d = 0; d < draws; ++d) {
        const auto &s = samples[static_cast<std::size_t>(rng.integer(0, static_cast<long>(samples.size()) - 1))];
        target_mean(s, m_t, objective, t);
        for (std::size_t i = 0; i < dim; ++i) {
            const double g = -2.0 * (t[i] + s_noise * rng.normal() - f[i]);
            sum[i] += g;
            sq[i] += g * g;
        }
    }
    const double n = static_cast<double>(draws);
    double trace = 0;
    for (std::size_t i = 0; i < dim; ++i) {
        const double mean = sum[i] / n;
        trace += (sq[i] - n * mean * mean) / (n - 1.0);
    }
    return trace;
}

double gradient_covariance_closed_form(const std::vector<RadialSample> &samples, double m_t, double s_noise,
                                       ObjectiveKind objective) {
    const std::size_t dim = check_samples(samples, 1, "gradient_covariance_closed_form");
    std::vector<double> t(dim), mean(dim, 0.0);
    const double inv = 1.0 / static_cast<double>(samples.size());
    for (const auto &s : samples) {
        target_mean(s, 1.0, objective, t);
        for (std::size_t i = 0; i < dim; ++i) mean[i] += t[i] * inv;
    }
    double tr = 0;
    for (const auto &s : samples) {
        target_mean(s, 1.0, objective, t);
        for (std::size_t i = 0; i < dim; ++i) tr += (t[i] - mean[i]) * (t[i] - mean[i]) * inv;
    }
    return 4.0 * m_t * m_t * tr + 4.0 * s_noise * s_noise * static_cast<double>(dim);
}

std::vector<RadialSample> radial_samples(const PairBatch &pairs) {
    require(pairs.size() > 0 && pairs.x0.same_shape(pairs.y), "radial_samples: empty or mismatched pair batch");
    std::vector<RadialSample> out;
    for (int n = 0; n < pairs.size(); ++n) {
        const auto a = pairs.x0.sample(n), b = pairs.y.sample(n);
        RadialSample s;
        s.u.resize(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) s.u[i] = b[i] - a[i];
        s.r = l2_norm(s.u);
        if (s.r == 0.0) continue; // direction undefined
        for (auto &v : s.u) v /= s.r;
        out.push_back(std::move(s));
    }
    return out;
}

namespace {

std::vector<double> trailing_mean(const std::vector<double> &trace, int window) {
    std::vector<double> out(trace.size());
    double acc = 0;
    for (std::size_t i = 0; i < trace.size(); ++i) {
        acc += trace[i];
        if (i >= static_cast<std::size_t>(window)) acc -= trace[i - window];
        out[i] = acc / static_cast<double>(std::min<std::size_t>(i + 1, window));
    }
    return out;
}

} // namespace

int plateau_iteration(const std::vector<double> &trace, int window, double rel_tol) {
    require(window >= 1 && static_cast<int>(trace.size()) >= window, "plateau_iteration: trace shorter than the window");
    require(rel_tol > 0.0, "plateau_iteration: tolerance must be positive");
    const auto sm = trailing_mean(trace, window);
    const double final_value = sm.back();
    for (std::size_t i = window - 1; i < sm.size(); ++i)
        if (std::abs(sm[i] - final_value) <= rel_tol * std::abs(final_value)) return static_cast<int>(i);
    return static_cast<int>(sm.size()) - 1;
}

std::vector<ConvergenceRun> convergence_experiment(const PairBatch &high_var, const PairBatch &low_var,
                                                   const BridgeSchedule &sched, const ConvergenceOptions &opts) {
    std::vector<ConvergenceRun> runs;
    for (const auto &[name, data] : {std::pair<const char *, const PairBatch *>{"high", &high_var}, {"low", &low_var}}) {
        for (ObjectiveKind k : {ObjectiveKind::raw, ObjectiveKind::unitized}) {
            Rng init(opts.init_seed);
            Denoiser model(opts.denoiser, init);
            ConvergenceRun run;
            run.corpus = name;
            run.objective = k;
            run.trace = fit_noise_predictor(model, model.params(), *data, nullptr, sched, k, opts.train);
            run.plateau = plateau_iteration(run.trace, opts.window, opts.rel_tol);
            runs.push_back(std::move(run));
        }
    }
    return runs;
}

void write_traces_csv(const std::filesystem::path &path, const std::vector<ConvergenceRun> &runs) {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot write " + path.string());
    f.precision(17);
    f << "iteration";
    for (const auto &r : runs) f << ',' << r.corpus << '_' << to_string(r.objective);
    f << '\n';
    std::size_t n = 0;
    for (const auto &r : runs) n = std::max(n, r.trace.size());
    for (std::size_t i = 0; i < n; ++i) {
        f << i;
        for (const auto &r : runs) {
            f << ',';
            if (i < r.trace.size()) f << r.trace[i];
        }
        f << '\n';
    }
}

void write_traces_svg(const std::filesystem::path &path, const std::vector<ConvergenceRun> &runs, int window) {
    const double W = 640, H = 400, pad = 50;
    static const char *colors[] = {"#d62728", "#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b"};
    std::vector<std::vector<double>> curves;
    double ymax = 0;
    std::size_t n = 1;
    for (const auto &r : runs) {
        auto sm = trailing_mean(r.trace, std::max(1, window));
        const double first = sm.empty() || sm.front() == 0.0 ? 1.0 : sm.front();
        for (auto &v : sm) {
            v /= first;
            ymax = std::max(ymax, v);
        }
        n = std::max(n, sm.size());
        curves.push_back(std::move(sm));
    }
    if (ymax <= 0.0) ymax = 1.0;
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<line x1=\"" << pad << "\" y1=\"" << H - pad << "\" x2=\"" << W - pad << "\" y2=\"" << H - pad << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << pad << "\" y1=\"" << pad << "\" x2=\"" << pad << "\" y2=\"" << H - pad << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << W / 2 << "\" y=\"" << H - 15 << "\" text-anchor=\"middle\" font-size=\"12\">iteration</text>\n";
    os << "<text x=\"15\" y=\"" << H / 2 << "\" font-size=\"12\" transform=\"rotate(-90 15 " << H / 2
       << ")\" text-anchor=\"middle\">loss / initial loss</text>\n";
    for (std::size_t c = 0; c < curves.size(); ++c) {
        os << "<polyline fill=\"none\" stroke-width=\"1.5\" stroke=\"" << colors[c % 6] << "\" points=\"";
        for (std::size_t i = 0; i < curves[c].size(); ++i) {
            const double x = pad + (W - 2 * pad) * static_cast<double>(i) / static_cast<double>(std::max<std::size_t>(1, n - 1));
            const double y = H - pad - (H - 2 * pad) * curves[c][i] / ymax;
            os << x << ',' << y << ' ';
        }
        os << "\"/>\n";
        os << "<text x=\"" << W - pad - 150 << "\" y=\"" << pad + 15 * c << "\" font-size=\"12\" fill=\"" << colors[c % 6]
           << "\">" << runs[c].corpus << " / " << to_string(runs[c].objective) << "</text>\n";
    }
    os << "</svg>\n";
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot write " + path.string());
    f << os.str();
}

} // namespace sparsebridge
