#include "sparsebridge/control.hpp"

#include <algorithm>

#include "sparsebridge/errors.hpp"
#include "sparsebridge/slerp.hpp"

namespace sparsebridge {

PairSet make_control_pairs(const std::vector<PairedVolume> &corpus, const Encoder &encoder, const KnowledgeBase &kb,
                           const PairOptions &opts, Rng &rng) {
    require(opts.slerp_augment_prob >= 0.0 && opts.slerp_augment_prob <= 1.0,
            "make_control_pairs: slerp_augment_prob must lie in [0, 1]");
    if (!kb.calibrated()) throw ConfigError("make_control_pairs: knowledge base tau is not calibrated");
    const SliceLibrary library(corpus);

    PairSet out;
    for (const auto &pv : corpus) {
        std::vector<Tensor> px;
        for (const auto &s : pv.source.slices) px.push_back(s.pixels);
        const auto emb = embed_slices(encoder, px);
        for (std::size_t i = 0; i < pv.source.slices.size(); ++i) {
            const Slice &y = pv.source.slices[i];
            QueryOptions q;
            q.exclude_subject = y.subject_id;
            if (opts.position_filter) {
                q.position_hint = y.position;
                q.max_pos_delta = opts.max_pos_delta;
            }
            QueryResult res;
            try {
                res = kb.search(emb[i], q);
            } catch (const NoCandidateError &) {
                ++out.skipped_no_candidate;
                continue;
            }
            if (!res.hit) {
                ++out.skipped_miss;
                continue;
            }
            const KbRecord &rec = kb.record(res.row);
            ControlTrainingPair p;
            p.r = library.source(rec.subject_id, rec.position);
            p.target = library.target(rec.subject_id, rec.position);
            p.y = y.pixels;
            p.y_subject = y.subject_id;
            p.y_position = y.position;
            p.r_subject = p.target_subject = rec.subject_id;
            p.r_position = p.target_position = rec.position;
            p.similarity = res.similarity;
            // Both draws happen for every emitted pair so the stream does not
            // depend on the augmentation outcome.
            const double u = rng.uniform(), a = rng.uniform();
            if (u < opts.slerp_augment_prob) {
                p.y = slerp(p.y, p.r, a);
                for (auto &v : p.y.values()) v = std::clamp(v, 0.0, 1.0);
                p.augmented = true;
            }
            out.pairs.push_back(std::move(p));
        }
    }
    return out;
}

PairBatch pair_batch(const std::vector<ControlTrainingPair> &pairs, Tensor *controls) {
    if (pairs.empty()) throw InvalidArgument("pair_batch: no pairs");
    std::vector<Tensor> x0, y, r;
    for (const auto &p : pairs) {
        x0.push_back(p.target);
        y.push_back(p.y);
        r.push_back(p.r);
    }
    if (controls) *controls = stack_slices(r);
    return {stack_slices(x0), stack_slices(y)};
}

ControlTrainResult train_control(Denoiser &backbone, ControlBranch &branch, const std::vector<ControlTrainingPair> &pairs,
                                 const BridgeSchedule &sched, ObjectiveKind objective, const TrainOptions &opts) {
    if (pairs.empty()) throw InvalidArgument("train_control: empty pair set");
    backbone.params().set_trainable(false);
    branch.params().set_trainable(true);
    ControlTrainResult res;
    res.backbone_hash_before = backbone.params().hash();
    Tensor controls;
    const PairBatch data = pair_batch(pairs, &controls);
    const ControlledDenoiser model(backbone, &branch);
    res.trace = fit_noise_predictor(model, branch.params(), data, &controls, sched, objective, opts);
    res.backbone_hash_after = backbone.params().hash();
    return res;
}

Tensor controlled_sample(const Denoiser &backbone, const ControlBranch *branch, const BridgeSchedule &sched,
                         const Tensor &y, const Tensor &r, const SamplerOptions &opts, std::span<Rng> rngs) {
    require(y.same_shape(r), "controlled_sample: y and r shapes differ");
    const ControlledDenoiser model(backbone, branch);
    return sample(model, sched, y, opts, rngs, branch ? &r : nullptr);
}

} // namespace sparsebridge
