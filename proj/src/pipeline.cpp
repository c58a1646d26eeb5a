#include "sparsebridge/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "sparsebridge/errors.hpp"

namespace sparsebridge {

std::string to_string(Directive d) {
    switch (d) {
    case Directive::direct: return "direct";
    case Directive::retrieved: return "retrieved";
    case Directive::interpolated: return "interpolated";
    }
    return "?";
}

Directive parse_directive(const std::string &s) {
    if (s == "direct") return Directive::direct;
    if (s == "retrieved") return Directive::retrieved;
    if (s == "interpolated") return Directive::interpolated;
    throw InvalidArgument("unknown directive '" + s + "'");
}

int ReconstructionPlan::count(Directive d) const {
    return static_cast<int>(std::count_if(entries.begin(), entries.end(), [&](const PlanEntry &e) { return e.directive == d; }));
}

double ReconstructionPlan::hit_rate() const {
    const int missing = count(Directive::retrieved) + count(Directive::interpolated);
    return missing == 0 ? 0.0 : static_cast<double>(count(Directive::retrieved)) / missing;
}

void ReconstructionPlan::validate(const std::vector<long> &grid) const {
    std::vector<long> pos;
    for (const auto &e : entries) pos.push_back(e.position);
    std::vector<long> sorted_grid = grid;
    std::sort(sorted_grid.begin(), sorted_grid.end());
    require(pos == sorted_grid, "plan positions do not cover the grid exactly once");
    for (const auto &e : entries) {
        const std::string at = " at position " + std::to_string(e.position);
        if (e.directive == Directive::retrieved)
            require(e.similarity && *e.similarity >= tau, "retrieved entry below tau" + at);
        if (e.directive == Directive::interpolated)
            require(!e.similarity || *e.similarity < tau, "interpolated entry with a hit" + at);
        if (e.directive != Directive::direct) require(e.alpha > 0.0 && e.alpha < 1.0, "alpha outside (0, 1)" + at);
    }
}

nlohmann::json ReconstructionPlan::to_json() const {
    nlohmann::json j;
    j["subject_id"] = subject_id;
    j["dense_extent"] = dense_extent;
    j["tau"] = tau;
    j["counts"] = {{"direct", count(Directive::direct)},
                   {"retrieved", count(Directive::retrieved)},
                   {"interpolated", count(Directive::interpolated)}};
    j["hit_rate"] = hit_rate();
    auto &es = j["entries"] = nlohmann::json::array();
    for (const auto &e : entries) {
        nlohmann::json x{{"position", e.position}, {"directive", to_string(e.directive)}};
        x["similarity"] = e.similarity ? nlohmann::json(*e.similarity) : nlohmann::json(nullptr);
        if (e.no_candidate) x["no_candidate"] = true;
        if (e.directive != Directive::direct) {
            x["neighbors"] = {e.left, e.right};
            x["alpha"] = e.alpha;
        }
        if (!e.r_locator.empty()) x["reference"] = e.r_locator;
        es.push_back(std::move(x));
    }
    return j;
}

std::vector<long> dense_grid(const Volume &volume) {
    std::vector<long> g(volume.dense_extent);
    std::iota(g.begin(), g.end(), 0L);
    return g;
}

namespace {

// Fills similarity / directive / r of an entry from a knowledge-base query.
void apply_query(PlanEntry &e, const KnowledgeBase &kb, std::span<const double> probe, const SliceLibrary &library,
                 const PlanOptions &opts, Directive on_miss) {
    QueryOptions q;
    q.position_hint = e.position;
    q.max_pos_delta = opts.max_pos_delta;
    try {
        const QueryResult res = kb.search(probe, q);
        e.similarity = res.similarity;
        if (res.hit) {
            const KbRecord &rec = kb.record(res.row);
            e.directive = Directive::retrieved;
            e.r = library.source(rec.subject_id, rec.position);
            e.r_locator = rec.locator;
            return;
        }
    } catch (const NoCandidateError &) {
        e.no_candidate = true;
    }
    e.directive = on_miss;
}

} // namespace

ReconstructionPlan plan_reconstruction(const Volume &sparse, const KnowledgeBase &kb, const Encoder &encoder,
                                       const SliceLibrary &library, const std::vector<long> &target_positions,
                                       const PlanOptions &opts) {
    if (sparse.slices.size() < 2) throw InvalidArgument("plan_reconstruction: need at least two source slices");
    if (opts.use_retrieval && !kb.calibrated()) throw ConfigError("plan_reconstruction: knowledge base tau is not calibrated");
    std::vector<long> grid = target_positions;
    std::sort(grid.begin(), grid.end());
    require(std::adjacent_find(grid.begin(), grid.end()) == grid.end(), "plan_reconstruction: duplicate target positions");
    for (const auto &s : sparse.slices)
        require(std::binary_search(grid.begin(), grid.end(), s.position),
                "plan_reconstruction: source position " + std::to_string(s.position) + " missing from the target grid");

    ReconstructionPlan plan;
    plan.subject_id = sparse.subject_id;
    plan.dense_extent = sparse.dense_extent;
    plan.spacing = sparse.spacing;
    plan.height = sparse.height;
    plan.width = sparse.width;
    plan.tau = opts.use_retrieval ? kb.tau() : 1.0;

    const auto &src = sparse.slices;
    const long first_gap = src[1].position - src[0].position;
    const long last_gap = src.back().position - src[src.size() - 2].position;
    std::vector<Tensor> probes;
    for (long p : grid) {
        PlanEntry e;
        e.position = p;
        if (const Slice *s = sparse.find(p)) {
            e.y = e.r = s->pixels;
            plan.entries.push_back(std::move(e));
            probes.emplace_back();
            continue;
        }
        const Slice *lo = nullptr, *hi = nullptr;
        for (const auto &s : src) {
            if (s.position < p) lo = &s;
            if (s.position > p && !hi) hi = &s;
        }
        if (lo && hi) {
            e.left = lo->position;
            e.right = hi->position;
        } else if (lo) {
            hi = lo;
            e.left = lo->position;
            e.right = lo->position + last_gap * ((p - lo->position) / last_gap + 1);
        } else {
            lo = hi;
            e.right = hi->position;
            e.left = hi->position - first_gap * ((hi->position - p) / first_gap + 1);
        }
        e.alpha = static_cast<double>(p - e.left) / static_cast<double>(e.right - e.left);
        e.y = slerp(lo->pixels, hi->pixels, e.alpha, opts.parallel_tol);
        for (auto &v : e.y.values()) v = std::clamp(v, 0.0, 1.0);
        e.r = e.y;
        e.directive = Directive::interpolated;
        probes.push_back(e.y);
        plan.entries.push_back(std::move(e));
    }

    if (opts.use_retrieval) {
        std::vector<Tensor> batch;
        std::vector<std::size_t> which;
        for (std::size_t i = 0; i < plan.entries.size(); ++i) {
            const bool direct = plan.entries[i].directive == Directive::direct;
            if (direct && !opts.retrieve_for_direct) continue;
            batch.push_back(direct ? plan.entries[i].y : probes[i]);
            which.push_back(i);
        }
        if (!batch.empty()) {
            const auto emb = embed_slices(encoder, batch);
            for (std::size_t k = 0; k < which.size(); ++k) {
                PlanEntry &e = plan.entries[which[k]];
                if (e.directive == Directive::direct) {
                    // A hit only swaps the control slice; the entry stays direct.
                    PlanEntry probe = e;
                    apply_query(probe, kb, emb[k], library, opts, Directive::direct);
                    e.similarity = probe.similarity;
                    if (probe.directive == Directive::retrieved) {
                        e.r = probe.r;
                        e.r_locator = probe.r_locator;
                    }
                } else {
                    apply_query(e, kb, emb[k], library, opts, Directive::interpolated);
                }
            }
        }
    }
    return plan;
}

Volume reconstruct_volume(const ReconstructionPlan &plan, const Denoiser &backbone, const ControlBranch *branch,
                          const BridgeSchedule &sched, const SamplerOptions &opts, std::uint64_t seed) {
    if (plan.entries.empty()) throw InvalidArgument("reconstruct_volume: empty plan");
    std::vector<Tensor> ys, rs;
    std::vector<Rng> rngs;
    for (const auto &e : plan.entries) {
        ys.push_back(e.y);
        rs.push_back(e.r);
        rngs.emplace_back(mix_seed(seed, static_cast<std::uint64_t>(e.position)));
    }
    const Tensor out = controlled_sample(backbone, branch, sched, stack_slices(ys), stack_slices(rs), opts, rngs);
    Volume v;
    v.subject_id = plan.subject_id;
    v.modality = Modality::target;
    v.dense_extent = plan.dense_extent;
    v.spacing = plan.spacing;
    v.height = plan.height;
    v.width = plan.width;
    for (std::size_t i = 0; i < plan.entries.size(); ++i) {
        Tensor px({plan.height, plan.width});
        const auto s = out.sample(static_cast<int>(i));
        std::copy(s.begin(), s.end(), px.values().begin());
        quantize_to_f32(px);
        v.slices.push_back({std::move(px), plan.subject_id, Modality::target, plan.entries[i].position, plan.spacing});
    }
    return v;
}

Volume nearest_neighbor_fill(const Volume &sparse, const std::vector<long> &grid) {
    if (sparse.slices.empty()) throw InvalidArgument("nearest_neighbor_fill: empty volume");
    Volume out = sparse;
    out.slices.clear();
    std::vector<long> g = grid;
    std::sort(g.begin(), g.end());
    for (long p : g) {
        const Slice *best = nullptr;
        for (const auto &s : sparse.slices)
            if (!best || std::abs(s.position - p) < std::abs(best->position - p)) best = &s;
        Slice s = *best;
        s.position = p;
        out.slices.push_back(std::move(s));
    }
    return out;
}

std::vector<int> nested_subset(int n, double fraction, std::uint64_t seed) {
    require(n >= 1, "nested_subset: n must be positive");
    require(fraction > 0.0 && fraction <= 1.0, "nested_subset: fraction must lie in (0, 1]");
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    rng.shuffle(idx.begin(), idx.end());
    const auto k = static_cast<std::size_t>(std::max(1.0, std::ceil(fraction * n - 1e-9)));
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

} // namespace sparsebridge
