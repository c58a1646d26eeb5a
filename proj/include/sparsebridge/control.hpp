#pragma once
// Retrieval-defined training pairs for the control branch, branch training
// against a frozen backbone, and controlled sampling.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sparsebridge/bridge.hpp"
#include "sparsebridge/data.hpp"
#include "sparsebridge/nets.hpp"
#include "sparsebridge/retrieval.hpp"

namespace sparsebridge {

// y drives the bridge; r conditions the branch; target is the target-modality
// slice paired with r (same subject and position as r).
struct ControlTrainingPair {
    Tensor y, r, target;
    std::string y_subject, r_subject, target_subject;
    long y_position = 0, r_position = 0, target_position = 0;
    double similarity = 0;
    bool augmented = false;
};

struct PairOptions {
    double slerp_augment_prob = 0.25;
    // Candidates are limited to |position - anchor position| <= max_pos_delta.
    bool position_filter = true;
    long max_pos_delta = 4;
};

struct PairSet {
    std::vector<ControlTrainingPair> pairs;
    int skipped_miss = 0;         // best match below tau
    int skipped_no_candidate = 0; // filters excluded every row
    int skipped() const { return skipped_miss + skipped_no_candidate; }
};

// One anchor per source slice in corpus order; r is retrieved from the other
// subjects of `kb`, which must have a calibrated tau and rows resolvable in
// `corpus`. Misses are skipped and counted.
PairSet make_control_pairs(const std::vector<PairedVolume> &corpus, const Encoder &encoder, const KnowledgeBase &kb,
                           const PairOptions &opts, Rng &rng);

// Stacks pairs into bridge pairs (x0 = target, y = y) and the control batch.
PairBatch pair_batch(const std::vector<ControlTrainingPair> &pairs, Tensor *controls);

struct ControlTrainResult {
    std::vector<double> trace;
    std::uint64_t backbone_hash_before = 0;
    std::uint64_t backbone_hash_after = 0;
};

// Freezes the backbone and optimizes only the branch on the controlled loss.
ControlTrainResult train_control(Denoiser &backbone, ControlBranch &branch, const std::vector<ControlTrainingPair> &pairs,
                                 const BridgeSchedule &sched, ObjectiveKind objective, const TrainOptions &opts);

// bridge::sample with the branch fed r at every step; branch == nullptr
// gives the uncontrolled sampler.
Tensor controlled_sample(const Denoiser &backbone, const ControlBranch *branch, const BridgeSchedule &sched,
                         const Tensor &y, const Tensor &r, const SamplerOptions &opts, std::span<Rng> rngs);

} // namespace sparsebridge
