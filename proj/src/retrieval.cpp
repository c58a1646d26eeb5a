#include "sparsebridge/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>

#include <json.hpp>

#include "sparsebridge/errors.hpp"

namespace sparsebridge {

namespace fs = std::filesystem;

void PositiveSpec::validate() const {
    require(!offsets.empty(), "PositiveSpec: at least one offset required");
    std::set<int> seen;
    for (int k : offsets) {
        require(k >= 1, "PositiveSpec: offsets must be >= 1");
        require(seen.insert(k).second, "PositiveSpec: offsets must be distinct");
    }
}

int PositiveSpec::max_offset() const { return *std::max_element(offsets.begin(), offsets.end()); }

// ---------------------------------------------------------------- losses

namespace {

void check_sets(std::span<const double> anchor, const VectorSet &pos, const VectorSet &neg, double temp,
                const char *what) {
    if (pos.empty() || neg.empty()) throw InvalidArgument(std::string(what) + ": positive and negative sets must be non-empty");
    require(temp > 0.0, std::string(what) + ": temperature must be positive");
    for (const auto *set : {&pos, &neg})
        for (const auto &v : *set) require(v.size() == anchor.size(), std::string(what) + ": vector length mismatch");
}

double log_sum_exp(const std::vector<double> &s, std::size_t lo, std::size_t hi) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = lo; i < hi; ++i) mx = std::max(mx, s[i]);
    double acc = 0;
    for (std::size_t i = lo; i < hi; ++i) acc += std::exp(s[i] - mx);
    return mx + std::log(acc);
}

// Shared log-ratio form over scores s (positives first). Returns the loss and
// dL/ds in `w`: softmax over all minus softmax over positives.
double ratio_loss(const std::vector<double> &s, std::size_t n_pos, std::vector<double> *w) {
    const double all = log_sum_exp(s, 0, s.size());
    const double pos = log_sum_exp(s, 0, n_pos);
    if (w) {
        w->resize(s.size());
        for (std::size_t i = 0; i < s.size(); ++i) {
            (*w)[i] = std::exp(s[i] - all);
            if (i < n_pos) (*w)[i] -= std::exp(s[i] - pos);
        }
    }
    return all - pos;
}

double sq_dist(std::span<const double> a, std::span<const double> b) {
    double acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    return acc;
}

template <class Score, class Grad>
SetLossGrad set_loss(std::span<const double> anchor, const VectorSet &pos, const VectorSet &neg, bool want_grad,
                     Score score, Grad grad) {
    std::vector<double> s;
    s.reserve(pos.size() + neg.size());
    for (const auto &v : pos) s.push_back(score(anchor, v));
    for (const auto &v : neg) s.push_back(score(anchor, v));
    SetLossGrad out;
    std::vector<double> w;
    out.loss = ratio_loss(s, pos.size(), want_grad ? &w : nullptr);
    if (!want_grad) return out;
    out.d_anchor.assign(anchor.size(), 0.0);
    auto one = [&](std::span<const double> v, double wi, std::vector<double> &dv) {
        dv.assign(v.size(), 0.0);
        grad(anchor, v, wi, out.d_anchor, dv);
    };
    out.d_pos.resize(pos.size());
    out.d_neg.resize(neg.size());
    for (std::size_t i = 0; i < pos.size(); ++i) one(pos[i], w[i], out.d_pos[i]);
    for (std::size_t i = 0; i < neg.size(); ++i) one(neg[i], w[pos.size() + i], out.d_neg[i]);
    return out;
}

SetLossGrad contrastive_impl(std::span<const double> a, const VectorSet &pos, const VectorSet &neg, double alpha,
                             bool want_grad) {
    check_sets(a, pos, neg, alpha, "contrastive_loss");
    return set_loss(
        a, pos, neg, want_grad, [&](auto x, auto v) { return dot(x, v) / alpha; },
        [&](auto x, auto v, double wi, std::vector<double> &da, std::vector<double> &dv) {
            for (std::size_t k = 0; k < x.size(); ++k) {
                da[k] += wi * v[k] / alpha;
                dv[k] = wi * x[k] / alpha;
            }
        });
}

SetLossGrad perceptual_impl(std::span<const double> a, const VectorSet &pos, const VectorSet &neg, double beta,
                            bool want_grad) {
    check_sets(a, pos, neg, beta, "perceptual_loss");
    return set_loss(
        a, pos, neg, want_grad, [&](auto x, auto v) { return -sq_dist(x, v) / beta; },
        [&](auto x, auto v, double wi, std::vector<double> &da, std::vector<double> &dv) {
            for (std::size_t k = 0; k < x.size(); ++k) {
                const double g = 2.0 * wi * (x[k] - v[k]) / beta;
                da[k] -= g;
                dv[k] = g;
            }
        });
}

} // namespace

double contrastive_loss(std::span<const double> anchor, const VectorSet &positives, const VectorSet &negatives,
                        double alpha) {
    return contrastive_impl(anchor, positives, negatives, alpha, false).loss;
}

SetLossGrad contrastive_loss_grad(std::span<const double> anchor, const VectorSet &positives,
                                  const VectorSet &negatives, double alpha) {
    return contrastive_impl(anchor, positives, negatives, alpha, true);
}

double perceptual_loss(std::span<const double> anchor, const VectorSet &positives, const VectorSet &negatives,
                       double beta) {
    return perceptual_impl(anchor, positives, negatives, beta, false).loss;
}

SetLossGrad perceptual_loss_grad(std::span<const double> anchor, const VectorSet &positives,
                                 const VectorSet &negatives, double beta) {
    return perceptual_impl(anchor, positives, negatives, beta, true);
}

// ---------------------------------------------------------------- training

namespace {

std::span<const double> row_of(const Tensor &m, int i) {
    const std::size_t d = static_cast<std::size_t>(m.dim(1));
    return {m.data() + i * d, d};
}

void accumulate_row(Tensor &g, int i, const std::vector<double> &d, double scale) {
    double *p = g.data() + static_cast<std::size_t>(i) * g.dim(1);
    for (std::size_t k = 0; k < d.size(); ++k) p[k] += scale * d[k];
}

// One group per anchor: rows [anchor, positives...] of a stacked batch.
struct Group {
    int subject;
    std::vector<int> rows;
};

// Mean over anchors of the set loss; gradients accumulated into g.
double batch_set_loss(const Tensor &feats, const std::vector<Group> &groups, double temp, bool perceptual, Tensor *g) {
    double total = 0;
    const double inv = 1.0 / static_cast<double>(groups.size());
    for (const auto &grp : groups) {
        VectorSet pos, neg;
        std::vector<int> neg_rows;
        for (std::size_t k = 1; k < grp.rows.size(); ++k) pos.push_back(row_of(feats, grp.rows[k]));
        for (const auto &other : groups) {
            if (other.subject == grp.subject) continue;
            for (int r : other.rows) {
                neg.push_back(row_of(feats, r));
                neg_rows.push_back(r);
            }
        }
        const auto a = row_of(feats, grp.rows[0]);
        const SetLossGrad lg = perceptual ? perceptual_impl(a, pos, neg, temp, g != nullptr)
                                          : contrastive_impl(a, pos, neg, temp, g != nullptr);
        total += lg.loss;
        if (!g) continue;
        accumulate_row(*g, grp.rows[0], lg.d_anchor, inv);
        for (std::size_t k = 0; k < lg.d_pos.size(); ++k) accumulate_row(*g, grp.rows[k + 1], lg.d_pos[k], inv);
        for (std::size_t k = 0; k < lg.d_neg.size(); ++k) accumulate_row(*g, neg_rows[k], lg.d_neg[k], inv);
    }
    return total * inv;
}

} // namespace

std::vector<double> train_retriever(Encoder &encoder, const std::vector<Volume> &corpus, const RetrieverOptions &opts) {
    opts.positives.validate();
    require(opts.iters >= 1 && opts.batch_size >= 2, "train_retriever: iters >= 1 and batch_size >= 2 required");
    require(opts.alpha > 0 && opts.beta > 0 && opts.lambda >= 0, "train_retriever: alpha, beta > 0 and lambda >= 0 required");
    std::set<std::string> subjects;
    for (const auto &v : corpus) subjects.insert(v.subject_id);
    if (subjects.size() < 2) throw InvalidArgument("train_retriever: corpus needs at least two subjects");
    const int kmax = opts.positives.max_offset();
    for (const auto &v : corpus)
        if (static_cast<int>(v.slices.size()) <= kmax)
            throw InvalidArgument("train_retriever: volume " + v.subject_id + " has too few slices for the positive offsets");

    Adam adam(encoder.params(), opts.adam);
    Rng rng(opts.seed);
    std::vector<int> order(corpus.size());
    std::vector<double> trace;
    trace.reserve(opts.iters);
    for (int it = 0; it < opts.iters; ++it) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        rng.shuffle(order.begin(), order.end());
        const int n_anchor = std::min<int>(opts.batch_size, static_cast<int>(order.size()));

        // Anchor positions cluster around a shared centre, clipped to each volume.
        const double centre = rng.uniform();
        std::vector<Tensor> batch;
        std::vector<Group> groups;
        for (int a = 0; a < n_anchor; ++a) {
            const Volume &v = corpus[order[a]];
            const long last = static_cast<long>(v.slices.size()) - 1 - kmax;
            const long c = std::lround(centre * last);
            const long p = std::clamp(c + rng.integer(-opts.position_spread, opts.position_spread), 0L, last);
            Group g{order[a], {}};
            g.rows.push_back(static_cast<int>(batch.size()));
            batch.push_back(v.slices[p].pixels);
            for (int k : opts.positives.offsets) {
                g.rows.push_back(static_cast<int>(batch.size()));
                batch.push_back(v.slices[p + k].pixels);
            }
            groups.push_back(std::move(g));
        }
        // Subjects are compared by id so duplicated volumes never act as negatives of each other.
        for (auto &g : groups) g.subject = static_cast<int>(std::distance(subjects.begin(), subjects.find(corpus[g.subject].subject_id)));

        const Encoding enc = encoder.forward(stack_slices(batch));
        Tensor g_emb = Tensor::zeros_like(enc.embedding->value);
        double loss = batch_set_loss(enc.embedding->value, groups, opts.alpha, false, &g_emb);
        std::vector<std::pair<ag::Var, Tensor>> roots{{enc.embedding, std::move(g_emb)}};
        if (opts.use_perceptual) {
            Tensor g_tap = Tensor::zeros_like(enc.tap_features->value);
            const double lp = batch_set_loss(enc.tap_features->value, groups, opts.beta, true, &g_tap);
            loss += opts.lambda * lp;
            g_tap *= opts.lambda;
            roots.emplace_back(enc.tap_features, std::move(g_tap));
        }
        ag::backward(roots);
        adam.step();
        trace.push_back(loss);
    }
    return trace;
}

std::vector<std::vector<double>> embed_slices(const Encoder &encoder, const std::vector<Tensor> &slices) {
    std::vector<std::vector<double>> out;
    out.reserve(slices.size());
    constexpr std::size_t chunk = 64;
    for (std::size_t lo = 0; lo < slices.size(); lo += chunk) {
        const std::size_t hi = std::min(slices.size(), lo + chunk);
        const auto [emb, tap] = encoder.encode(stack_slices({slices.begin() + lo, slices.begin() + hi}));
        for (std::size_t i = 0; i < hi - lo; ++i) {
            std::vector<double> r(emb.data() + i * emb.dim(1), emb.data() + (i + 1) * emb.dim(1));
            const double n = l2_norm(r);
            if (!(n > 0.0)) throw InvalidArgument("embed_slices: zero embedding");
            for (auto &x : r) x /= n;
            out.push_back(std::move(r));
        }
    }
    return out;
}

// ---------------------------------------------------------------- knowledge base

void KnowledgeBase::add(std::span<const double> embedding, KbRecord record) {
    require(static_cast<int>(embedding.size()) == embed_dim_, "KnowledgeBase: embedding length mismatch");
    const double n = l2_norm(embedding);
    require(n > 0.0, "KnowledgeBase: zero embedding");
    for (double x : embedding) data_.push_back(static_cast<double>(static_cast<float>(x / n)));
    records_.push_back(std::move(record));
}

std::span<const double> KnowledgeBase::row(std::size_t i) const {
    require(i < rows(), "KnowledgeBase: row out of range");
    return {data_.data() + i * embed_dim_, static_cast<std::size_t>(embed_dim_)};
}

double KnowledgeBase::tau() const {
    if (!tau_) throw ConfigError("knowledge base has no calibrated tau");
    return *tau_;
}

void KnowledgeBase::set_tau(double tau) {
    require(tau >= -1.0 && tau <= 1.0, "KnowledgeBase: tau must lie in [-1, 1]");
    tau_ = tau;
}

QueryResult KnowledgeBase::search(std::span<const double> probe, const QueryOptions &opts) const {
    require(static_cast<int>(probe.size()) == embed_dim_, "KnowledgeBase::search: probe length mismatch");
    QueryResult best;
    bool found = false;
    for (std::size_t i = 0; i < rows(); ++i) {
        const auto &rec = records_[i];
        if (opts.position_hint && std::abs(rec.position - *opts.position_hint) > opts.max_pos_delta) continue;
        if (opts.exclude_subject && rec.subject_id == *opts.exclude_subject) continue;
        const double s = dot(probe, row(i));
        if (!found || s > best.similarity) {
            best.row = i;
            best.similarity = s;
            found = true;
        }
    }
    if (!found) throw NoCandidateError("no knowledge-base row passes the query filters");
    best.hit = tau_ && best.similarity >= *tau_;
    return best;
}

KnowledgeBase KnowledgeBase::restrict_to(const std::vector<std::string> &subjects) const {
    const std::set<std::string> keep(subjects.begin(), subjects.end());
    KnowledgeBase out(embed_dim_);
    out.tau_ = tau_;
    for (std::size_t i = 0; i < rows(); ++i) {
        if (!keep.count(records_[i].subject_id)) continue;
        const auto r = row(i);
        out.data_.insert(out.data_.end(), r.begin(), r.end());
        out.records_.push_back(records_[i]);
    }
    return out;
}

void KnowledgeBase::validate() const {
    require(embed_dim_ > 0, "KnowledgeBase: embed_dim must be positive");
    require(data_.size() == records_.size() * embed_dim_, "KnowledgeBase: row count differs from record count");
    for (std::size_t i = 0; i < rows(); ++i)
        require(std::abs(l2_norm(row(i)) - 1.0) <= 1e-6, "KnowledgeBase: row " + std::to_string(i) + " is not unit norm");
    if (tau_) require(*tau_ >= -1.0 && *tau_ <= 1.0, "KnowledgeBase: tau outside [-1, 1]");
}

void KnowledgeBase::save(const fs::path &dir) const {
    validate();
    fs::create_directories(dir);
    nlohmann::json m;
    m["format_version"] = 1;
    m["embed_dim"] = embed_dim_;
    m["rows"] = rows();
    m["tau"] = tau_ ? nlohmann::json(*tau_) : nlohmann::json(nullptr);
    m["embedding_file"] = "embeddings.f32";
    auto &recs = m["records"] = nlohmann::json::array();
    for (const auto &r : records_)
        recs.push_back({{"subject_id", r.subject_id}, {"modality", to_string(r.modality)}, {"position", r.position}, {"locator", r.locator}});
    {
        std::ofstream f(dir / "kb.json");
        if (!f) throw ConfigError("cannot write " + (dir / "kb.json").string());
        f << m.dump(2) << "\n";
    }
    const std::vector<float> buf(data_.begin(), data_.end());
    std::ofstream f(dir / "embeddings.f32", std::ios::binary | std::ios::trunc);
    f.write(reinterpret_cast<const char *>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

KnowledgeBase KnowledgeBase::load(const fs::path &dir) {
    std::ifstream mf(dir / "kb.json");
    if (!mf) throw ConfigError("missing knowledge base manifest " + (dir / "kb.json").string());
    KnowledgeBase kb;
    std::size_t n = 0;
    std::string file;
    try {
        const auto m = nlohmann::json::parse(mf);
        kb.embed_dim_ = m.at("embed_dim").get<int>();
        n = m.at("rows").get<std::size_t>();
        file = m.at("embedding_file").get<std::string>();
        if (!m.at("tau").is_null()) kb.tau_ = m.at("tau").get<double>();
        for (const auto &r : m.at("records"))
            kb.records_.push_back({r.at("subject_id").get<std::string>(), parse_modality(r.at("modality").get<std::string>()),
                                   r.at("position").get<long>(), r.at("locator").get<std::string>()});
    } catch (const nlohmann::json::exception &e) {
        throw ManifestError(std::string("malformed knowledge base manifest: ") + e.what());
    }
    if (kb.records_.size() != n) throw ManifestError("knowledge base manifest row count differs from its records");
    const std::size_t count = n * static_cast<std::size_t>(std::max(kb.embed_dim_, 0));
    const fs::path ep = dir / file;
    if (!fs::exists(ep)) throw ManifestError("missing embedding file " + ep.string());
    if (fs::file_size(ep) != count * sizeof(float)) throw TruncatedSliceError("embedding file size does not match the manifest");
    std::vector<float> buf(count);
    std::ifstream f(ep, std::ios::binary);
    f.read(reinterpret_cast<char *>(buf.data()), static_cast<std::streamsize>(count * sizeof(float)));
    kb.data_.assign(buf.begin(), buf.end());
    try {
        kb.validate();
    } catch (const InvalidArgument &e) {
        throw ManifestError(std::string("invalid knowledge base: ") + e.what());
    }
    return kb;
}

std::string slice_locator(const std::string &subject_id, Modality modality, long position) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "slice_%06ld.f32", position);
    return subject_id + "/" + to_string(modality) + "/" + buf;
}

KnowledgeBase build_kb(const Encoder &encoder, const std::vector<Volume> &corpus) {
    std::vector<Tensor> slices;
    std::vector<KbRecord> records;
    for (const auto &v : corpus) {
        if (v.modality != Modality::source) continue;
        for (const auto &s : v.slices) {
            slices.push_back(s.pixels);
            records.push_back({v.subject_id, v.modality, s.position, slice_locator(v.subject_id, v.modality, s.position)});
        }
    }
    if (slices.empty()) throw InvalidArgument("build_kb: corpus has no source slices");
    const auto emb = embed_slices(encoder, slices);
    KnowledgeBase kb(encoder.spec().embed_dim);
    for (std::size_t i = 0; i < emb.size(); ++i) kb.add(emb[i], std::move(records[i]));
    return kb;
}

// ---------------------------------------------------------------- tau

std::string to_string(TauMode m) { return m == TauMode::percentile ? "percentile" : "top_mean"; }

TauMode parse_tau_mode(const std::string &s) {
    if (s == "percentile") return TauMode::percentile;
    if (s == "top_mean") return TauMode::top_mean;
    throw InvalidArgument("unknown tau mode '" + s + "'");
}

double tau_from_scores(std::vector<double> scores, double p, TauMode mode) {
    if (scores.empty()) throw InvalidArgument("tau_from_scores: no scores");
    require(p > 0.0 && p < 100.0, "tau_from_scores: percentile must lie in (0, 100)");
    std::sort(scores.begin(), scores.end());
    const double n = static_cast<double>(scores.size());
    // The guard keeps exact products such as 95 * 100 / 100 from rounding up.
    constexpr double guard = 1e-9;
    if (mode == TauMode::percentile) {
        const auto rank = static_cast<std::size_t>(std::max(1.0, std::ceil((100.0 - p) * n / 100.0 - guard)));
        return scores[rank - 1];
    }
    const auto k = static_cast<std::size_t>(std::max(1.0, std::ceil(p * n / 100.0 - guard)));
    double acc = 0;
    for (std::size_t i = scores.size() - k; i < scores.size(); ++i) acc += scores[i];
    return acc / static_cast<double>(k);
}

std::vector<double> best_match_scores(const Encoder &encoder, const KnowledgeBase &kb, const std::vector<Slice> &queries) {
    if (queries.empty()) throw InvalidArgument("calibrate_tau: no queries");
    std::vector<Tensor> px;
    for (const auto &q : queries) px.push_back(q.pixels);
    const auto emb = embed_slices(encoder, px);
    std::vector<double> scores;
    for (std::size_t i = 0; i < queries.size(); ++i) {
        QueryOptions o;
        o.exclude_subject = queries[i].subject_id;
        try {
            scores.push_back(kb.search(emb[i], o).similarity);
        } catch (const NoCandidateError &) {
        }
    }
    if (scores.empty()) throw InvalidArgument("calibrate_tau: knowledge base has no rows from other subjects");
    return scores;
}

double calibrate_tau(const Encoder &encoder, const KnowledgeBase &kb, const std::vector<Slice> &queries, double p,
                     TauMode mode) {
    require(p > 0.0 && p < 100.0, "calibrate_tau: percentile must lie in (0, 100)");
    return tau_from_scores(best_match_scores(encoder, kb, queries), p, mode);
}

QueryResult query(const KnowledgeBase &kb, const Encoder &encoder, const Tensor &probe, const QueryOptions &opts) {
    if (!kb.calibrated()) throw ConfigError("query: knowledge base tau is not calibrated");
    const auto emb = embed_slices(encoder, {probe});
    return kb.search(emb[0], opts);
}

// ---------------------------------------------------------------- accuracy

double subject_match_rate(const std::vector<std::vector<double>> &queries, const std::vector<std::string> &query_subjects,
                          const std::vector<std::vector<double>> &database, const std::vector<std::string> &db_subjects) {
    require(queries.size() == query_subjects.size() && database.size() == db_subjects.size(),
            "subject_match_rate: label count mismatch");
    require(!queries.empty() && !database.empty(), "subject_match_rate: empty query or database set");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < queries.size(); ++i) {
        std::size_t best = 0;
        double best_s = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < database.size(); ++j) {
            const double s = dot(queries[i], database[j]);
            if (s > best_s) {
                best_s = s;
                best = j;
            }
        }
        if (db_subjects[best] == query_subjects[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(queries.size());
}

double retrieval_accuracy(const Encoder &encoder, const std::vector<Volume> &eval_volumes) {
    std::set<std::string> subjects;
    for (const auto &v : eval_volumes) subjects.insert(v.subject_id);
    if (subjects.size() < 2) throw InvalidArgument("retrieval_accuracy: need at least two subjects");
    std::vector<Tensor> q, d;
    std::vector<std::string> qs, ds;
    for (const auto &v : eval_volumes)
        for (std::size_t i = 0; i < v.slices.size(); ++i) {
            (i % 2 == 0 ? q : d).push_back(v.slices[i].pixels);
            (i % 2 == 0 ? qs : ds).push_back(v.subject_id);
        }
    return subject_match_rate(embed_slices(encoder, q), qs, embed_slices(encoder, d), ds);
}

} // namespace sparsebridge
