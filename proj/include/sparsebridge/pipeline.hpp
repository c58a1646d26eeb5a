#pragma once
// Sparse-to-dense reconstruction: per-position planning (direct, retrieved,
// interpolated) followed by controlled bridge sampling of every position.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sparsebridge/control.hpp"
#include "sparsebridge/data.hpp"
#include "sparsebridge/retrieval.hpp"
#include "sparsebridge/slerp.hpp"

namespace sparsebridge {

enum class Directive { direct, retrieved, interpolated };
std::string to_string(Directive d);
Directive parse_directive(const std::string &s);

struct PlanEntry {
    long position = 0;
    Directive directive = Directive::direct;
    Tensor y; // bridge input; the slerp interpolant for missing positions
    Tensor r; // control slice
    // Best-match similarity of the query; unset for direct entries and when
    // the position filter left no candidate.
    std::optional<double> similarity;
    bool no_candidate = false;
    long left = 0, right = 0; // source neighbours used for interpolation
    double alpha = 0;
    std::string r_locator;
};

struct ReconstructionPlan {
    std::string subject_id;
    long dense_extent = 0;
    double spacing = 1.0;
    int height = 0, width = 0;
    double tau = 0;
    std::vector<PlanEntry> entries; // increasing positions

    int count(Directive d) const;
    // Retrieved entries over non-direct entries; 0 when nothing is missing.
    double hit_rate() const;
    // Checks coverage of `grid`, the similarity gate and alpha ranges.
    void validate(const std::vector<long> &grid) const;
    // Audit record without pixel data.
    nlohmann::json to_json() const;
};

struct PlanOptions {
    long max_pos_delta = 4;
    double parallel_tol = 1e-6;
    // false forces every missing position to the interpolated directive.
    bool use_retrieval = true;
    // Direct positions also query the knowledge base and use a hit as control.
    bool retrieve_for_direct = false;
};

// Dense grid 0 .. dense_extent - 1 of a volume.
std::vector<long> dense_grid(const Volume &volume);

// Missing positions past either end of the source use a virtual neighbour
// that repeats the end slice one source spacing further out.
ReconstructionPlan plan_reconstruction(const Volume &sparse, const KnowledgeBase &kb, const Encoder &encoder,
                                       const SliceLibrary &library, const std::vector<long> &target_positions,
                                       const PlanOptions &opts = {});

// Samples every entry as one batch with per-position generators seeded from
// (seed, position). branch == nullptr gives the uncontrolled pipeline.
Volume reconstruct_volume(const ReconstructionPlan &plan, const Denoiser &backbone, const ControlBranch *branch,
                          const BridgeSchedule &sched, const SamplerOptions &opts, std::uint64_t seed);

// Dense volume copying, for each grid position, the nearest slice of `sparse`
// (ties go to the lower position).
Volume nearest_neighbor_fill(const Volume &sparse, const std::vector<long> &grid);

// The first ceil(fraction n) entries of a seeded permutation of 0..n-1, so
// smaller fractions select subsets of larger ones.
std::vector<int> nested_subset(int n, double fraction, std::uint64_t seed);

} // namespace sparsebridge
