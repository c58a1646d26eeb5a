#include <doctest.h>

#include "sparsebridge/control.hpp"
#include "sparsebridge/errors.hpp"
#include "sparsebridge/schedule.hpp"

using namespace sparsebridge;

namespace {

std::vector<PairedVolume> corpus() {
    PhantomParams p;
    p.n_subjects = 4;
    p.slices_per_subject = 8;
    p.image_size = 16;
    p.n_families = 2;
    return generate_corpus(p, 6);
}

Encoder encoder() {
    EncoderSpec s;
    s.image_size = 16;
    s.base_channels = 4;
    s.stages = 2;
    s.embed_dim = 8;
    Rng rng(1);
    return Encoder(s, rng);
}

KnowledgeBase kb_of(const Encoder &enc, const std::vector<PairedVolume> &c, double tau) {
    std::vector<Volume> src;
    for (const auto &pv : c) src.push_back(pv.source);
    auto kb = build_kb(enc, src);
    kb.set_tau(tau);
    return kb;
}

} // namespace

TEST_CASE("control pairs satisfy the pairing invariants") {
    const auto c = corpus();
    const auto enc = encoder();
    const auto kb = kb_of(enc, c, -1.0);
    const SliceLibrary lib(c);
    PairOptions o;
    o.slerp_augment_prob = 0.0;
    Rng rng(2);
    const auto set = make_control_pairs(c, enc, kb, o, rng);
    CHECK(set.pairs.size() == 32);
    CHECK(set.skipped() == 0);
    for (const auto &p : set.pairs) {
        CHECK(p.r_subject == p.target_subject);
        CHECK(p.r_position == p.target_position);
        CHECK(p.r_subject != p.y_subject);
        CHECK(std::abs(p.r_position - p.y_position) <= o.max_pos_delta);
        CHECK_FALSE(p.augmented);
        CHECK(p.y.values() == lib.source(p.y_subject, p.y_position).values());
        CHECK(p.r.values() == lib.source(p.r_subject, p.r_position).values());
        CHECK(p.target.values() == lib.target(p.target_subject, p.target_position).values());
    }
}

TEST_CASE("slerp augmentation") {
    const auto c = corpus();
    const auto enc = encoder();
    const auto kb = kb_of(enc, c, -1.0);
    PairOptions o;
    o.slerp_augment_prob = 1.0;
    Rng rng(2);
    const auto set = make_control_pairs(c, enc, kb, o, rng);
    for (const auto &p : set.pairs) {
        CHECK(p.augmented);
        for (double v : p.y.values()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
    o.slerp_augment_prob = 0.5;
    Rng r1(3), r2(3);
    const auto a = make_control_pairs(c, enc, kb, o, r1), b = make_control_pairs(c, enc, kb, o, r2);
    REQUIRE(a.pairs.size() == b.pairs.size());
    for (std::size_t i = 0; i < a.pairs.size(); ++i) CHECK(a.pairs[i].y.values() == b.pairs[i].y.values());
    o.slerp_augment_prob = 1.5;
    CHECK_THROWS_AS(make_control_pairs(c, enc, kb, o, rng), InvalidArgument);
}

TEST_CASE("misses and exhausted filters are skipped and counted") {
    const auto c = corpus();
    const auto enc = encoder();
    Rng rng(2);
    const auto miss = make_control_pairs(c, enc, kb_of(enc, c, 1.0), {}, rng);
    CHECK(miss.pairs.empty());
    CHECK(miss.skipped_miss == 32);

    auto shifted = c;
    for (auto &pv : shifted)
        for (auto *v : {&pv.source, &pv.target})
            for (auto &s : v->slices) s.position += 100;
    std::vector<Volume> src;
    for (const auto &pv : c) src.push_back(pv.source);
    auto kb = build_kb(enc, src);
    kb.set_tau(-1.0);
    const auto none = make_control_pairs(shifted, enc, kb, {}, rng);
    CHECK(none.skipped_no_candidate == 32);

    std::vector<Volume> src2;
    for (const auto &pv : c) src2.push_back(pv.source);
    CHECK_THROWS_AS(make_control_pairs(c, enc, build_kb(enc, src2), {}, rng), ConfigError);
}

TEST_CASE("control training freezes the backbone and starts from the uncontrolled loss") {
    const auto c = corpus();
    const auto enc = encoder();
    PairOptions o;
    o.slerp_augment_prob = 0.0;
    Rng rng(2);
    const auto pairs = make_control_pairs(c, enc, kb_of(enc, c, -1.0), o, rng).pairs;
    Rng init(4);
    Denoiser backbone({16, 8, 2, 32}, init);
    ControlBranch branch(backbone);
    const BridgeSchedule sched = build_schedule(100);

    Tensor controls;
    const PairBatch batch = pair_batch(pairs, &controls);
    CHECK(batch.size() == static_cast<int>(pairs.size()));
    CHECK(controls.dim(0) == batch.size());
    const ControlledDenoiser with(backbone, &branch), without(backbone, nullptr);
    LossOptions lo;
    lo.backprop = false;
    Rng ra(7), rb(7);
    const double lc = training_loss(with, batch, sched, ObjectiveKind::unitized, ra, &controls, lo);
    const double lu = training_loss(without, batch, sched, ObjectiveKind::unitized, rb, nullptr, lo);
    CHECK(lc == lu);

    TrainOptions to;
    to.iters = 4;
    to.batch_size = 8;
    to.adam.lr = 1e-3;
    const auto res = train_control(backbone, branch, pairs, sched, ObjectiveKind::unitized, to);
    CHECK(res.trace.size() == 4);
    CHECK(res.backbone_hash_before == res.backbone_hash_after);
    CHECK(res.backbone_hash_before == backbone.params().hash());
    Rng rc(7);
    CHECK(training_loss(with, batch, sched, ObjectiveKind::unitized, rc, &controls, lo) != lu);

    CHECK_THROWS_AS(train_control(backbone, branch, {}, sched, ObjectiveKind::unitized, to), InvalidArgument);
    CHECK_THROWS_AS(pair_batch({}, nullptr), InvalidArgument);
}

TEST_CASE("controlled sampling without a branch matches the plain sampler") {
    Rng init(4);
    const Denoiser backbone({16, 8, 2, 32}, init);
    const ControlBranch branch(backbone);
    const BridgeSchedule sched = build_schedule(40);
    PhantomParams p;
    p.n_subjects = 1;
    p.slices_per_subject = 2;
    p.image_size = 16;
    const auto v = generate_corpus(p, 1)[0].source;
    const Tensor y = v.stacked();
    SamplerOptions so;
    so.num_steps = 4;
    std::vector<Rng> r1{Rng(1), Rng(2)}, r2{Rng(1), Rng(2)}, r3{Rng(1), Rng(2)};
    const Tensor a = controlled_sample(backbone, nullptr, sched, y, y, so, r1);
    const Tensor b = sample(backbone, sched, y, so, std::span<Rng>(r2));
    const Tensor z = controlled_sample(backbone, &branch, sched, y, y, so, r3);
    CHECK(a.values() == b.values());
    CHECK(a.values() == z.values());
    CHECK_THROWS_AS(controlled_sample(backbone, &branch, sched, y, Tensor({1, 1, 16, 16}), so, r1), InvalidArgument);
}
