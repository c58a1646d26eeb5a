#pragma once
// Contrastive encoder training, the slice knowledge base, similarity
// threshold calibration and position-filtered retrieval.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sparsebridge/data.hpp"
#include "sparsebridge/nets.hpp"
#include "sparsebridge/optim.hpp"

namespace sparsebridge {

// Positive position offsets: the slice at p + k (k in offsets) of the same
// subject is a positive for the anchor at p.
struct PositiveSpec {
    std::vector<int> offsets{1, 2};

    void validate() const;
    int max_offset() const;
};

using VectorSet = std::vector<std::span<const double>>;

// Loss value and its gradients with respect to every input vector.
struct SetLossGrad {
    double loss = 0;
    std::vector<double> d_anchor;
    std::vector<std::vector<double>> d_pos, d_neg;
};

// -log(sum_pos sim / (sum_neg sim + sum_pos sim)), sim = exp(a . v / alpha).
double contrastive_loss(std::span<const double> anchor, const VectorSet &positives, const VectorSet &negatives,
                        double alpha);
SetLossGrad contrastive_loss_grad(std::span<const double> anchor, const VectorSet &positives,
                                  const VectorSet &negatives, double alpha);

// Same ratio with d = exp(-||a - v||^2 / beta).
double perceptual_loss(std::span<const double> anchor, const VectorSet &positives, const VectorSet &negatives,
                       double beta);
SetLossGrad perceptual_loss_grad(std::span<const double> anchor, const VectorSet &positives,
                                 const VectorSet &negatives, double beta);

struct RetrieverOptions {
    int iters = 300;
    // Anchors per batch, each from a different subject when possible.
    int batch_size = 12;
    // Anchor positions are drawn within this distance of a per-batch centre,
    // so negatives include other subjects at nearby positions.
    int position_spread = 3;
    double alpha = 1.0;
    double beta = 1.0;
    double lambda = 0.5;
    // When false the perceptual term and its graph are skipped entirely.
    bool use_perceptual = true;
    PositiveSpec positives;
    AdamOptions adam{.lr = 1e-3};
    std::uint64_t seed = 0;
};

// Minimizes contrast + lambda * percept over seeded batches of source slices.
// Returns the per-iteration mean loss.
std::vector<double> train_retriever(Encoder &encoder, const std::vector<Volume> &corpus, const RetrieverOptions &opts);

// Unit-normalized embeddings, one row per slice, in input order.
std::vector<std::vector<double>> embed_slices(const Encoder &encoder, const std::vector<Tensor> &slices);

struct KbRecord {
    std::string subject_id;
    Modality modality = Modality::source;
    long position = 0;
    // Slice file relative to a corpus directory laid out by the CLI.
    std::string locator;
};

struct QueryResult {
    std::size_t row = 0;
    double similarity = 0;
    bool hit = false;
};

struct QueryOptions {
    std::optional<long> position_hint;
    long max_pos_delta = 4;
    // Rows of this subject are skipped (pair making, calibration).
    std::optional<std::string> exclude_subject;
};

class KnowledgeBase {
  public:
    KnowledgeBase() = default;
    explicit KnowledgeBase(int embed_dim) : embed_dim_(embed_dim) {}

    // Normalizes the row and rounds it to f32 so persistence is bit-exact.
    void add(std::span<const double> embedding, KbRecord record);

    int embed_dim() const { return embed_dim_; }
    std::size_t rows() const { return records_.size(); }
    std::span<const double> row(std::size_t i) const;
    const KbRecord &record(std::size_t i) const { return records_.at(i); }
    const std::vector<KbRecord> &records() const { return records_; }

    bool calibrated() const { return tau_.has_value(); }
    double tau() const;
    void set_tau(double tau);

    // Best cosine row for a unit-normalized probe embedding. Throws
    // NoCandidateError when filters exclude every row. `hit` needs a
    // calibrated tau; uncalibrated bases report hit = false.
    QueryResult search(std::span<const double> probe_unit, const QueryOptions &opts = {}) const;

    // Rows whose subject is in `subjects`, in the original order; tau is kept.
    KnowledgeBase restrict_to(const std::vector<std::string> &subjects) const;

    // Throws InvalidArgument on any violated invariant.
    void validate() const;

    void save(const std::filesystem::path &dir) const;
    static KnowledgeBase load(const std::filesystem::path &dir);

  private:
    int embed_dim_ = 0;
    std::vector<double> data_;
    std::vector<KbRecord> records_;
    std::optional<double> tau_;
};

std::string slice_locator(const std::string &subject_id, Modality modality, long position);

// One row per source slice of every volume, in corpus order.
KnowledgeBase build_kb(const Encoder &encoder, const std::vector<Volume> &corpus);

enum class TauMode { percentile, top_mean };
std::string to_string(TauMode m);
TauMode parse_tau_mode(const std::string &s);

// percentile: nearest-rank (100 - p)th percentile; top_mean: mean of the top
// ceil(p n / 100) scores.
double tau_from_scores(std::vector<double> scores, double percentile_p, TauMode mode);

// Each query's best-match cosine over rows of other subjects, summarized by
// tau_from_scores. Does not modify the knowledge base.
std::vector<double> best_match_scores(const Encoder &encoder, const KnowledgeBase &kb, const std::vector<Slice> &queries);
double calibrate_tau(const Encoder &encoder, const KnowledgeBase &kb, const std::vector<Slice> &queries,
                     double percentile_p = 5.0, TauMode mode = TauMode::percentile);

// Embeds `probe` and searches. Throws ConfigError when tau is unset.
QueryResult query(const KnowledgeBase &kb, const Encoder &encoder, const Tensor &probe, const QueryOptions &opts = {});

// Top-1 subject match rate of query rows against database rows (unit rows).
double subject_match_rate(const std::vector<std::vector<double>> &queries, const std::vector<std::string> &query_subjects,
                          const std::vector<std::vector<double>> &database, const std::vector<std::string> &db_subjects);
// Splits every volume into even-position queries and odd-position database
// rows and reports the top-1 subject match rate. Chance is 1 / #volumes.
double retrieval_accuracy(const Encoder &encoder, const std::vector<Volume> &eval_volumes);

} // namespace sparsebridge
