#include <doctest.h>

#include <cstring>

#include "oracles.hpp"
#include "sparsebridge/checkpoint.hpp"
#include "sparsebridge/errors.hpp"
#include "sparsebridge/nets.hpp"
#include "sparsebridge/optim.hpp"

using namespace sparsebridge;

namespace {

bool bit_equal(const Tensor &a, const Tensor &b) {
    return a.same_shape(b) && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

std::size_t conv_params(int in, int out, int k) { return std::size_t(out) * in * k * k + out; }
std::size_t dense_params(int in, int out) { return std::size_t(out) * in + out; }
std::size_t block_params(int in, int out, int e) {
    return conv_params(in, out, 3) + dense_params(e, out) + conv_params(out, out, 3) + (in != out ? conv_params(in, out, 1) : 0);
}

std::size_t expected_denoiser_params(const DenoiserSpec &s) {
    std::size_t n = 2 * dense_params(s.time_embed_dim, s.time_embed_dim) + conv_params(1, s.channels(0), 3);
    int prev = s.channels(0);
    for (int l = 0; l < s.depth; ++l) {
        n += block_params(prev, s.channels(l), s.time_embed_dim);
        prev = s.channels(l);
    }
    n += block_params(prev, prev, s.time_embed_dim);
    for (int l = s.depth - 1; l >= 0; --l) {
        n += block_params(prev + s.channels(l), s.channels(l), s.time_embed_dim);
        prev = s.channels(l);
    }
    return n + conv_params(prev, 1, 1);
}

} // namespace

TEST_CASE("denoiser shape contract across image sizes") {
    for (int size : {16, 32, 64}) {
        Rng rng(size);
        Denoiser d(DenoiserSpec{size, 4, 3, 8}, rng);
        const Tensor x = oracle::uniform_tensor({2, 1, size, size}, rng);
        const std::vector<int> t{3, 900};
        const auto out = d.predict(x, t, nullptr);
        CHECK(out.shape() == x.shape());
        for (double v : out.values()) CHECK(std::isfinite(v));
    }
}

TEST_CASE("denoiser purity, zero residuals and parameter counts") {
    Rng rng(1);
    const DenoiserSpec spec{16, 4, 2, 8};
    Denoiser d(spec, rng);
    CHECK(d.params().scalar_count() == expected_denoiser_params(spec));
    // Frozen value for the default architecture; changes here are architecture drift.
    Rng rng2(2);
    CHECK(Denoiser(DenoiserSpec{}, rng2).params().scalar_count() == expected_denoiser_params(DenoiserSpec{}));
    CHECK(expected_denoiser_params(DenoiserSpec{}) == 1322561);

    const Tensor x = oracle::uniform_tensor({2, 1, 16, 16}, rng);
    const std::vector<int> t{5, 17};
    const auto a = d.predict(x, t, nullptr);
    CHECK(bit_equal(a, d.predict(x, t, nullptr)));

    std::vector<ag::Var> zeros;
    zeros.push_back(ag::constant(Tensor({2, 4, 16, 16})));
    zeros.push_back(ag::constant(Tensor({2, 8, 8, 8})));
    zeros.push_back(ag::constant(Tensor({2, 8, 4, 4})));
    ag::NoGradGuard g;
    CHECK(bit_equal(d.forward_with_residuals(x, t, &zeros)->value, a));
    zeros.pop_back();
    CHECK_THROWS_AS(d.forward_with_residuals(x, t, &zeros), InvalidArgument);
}

TEST_CASE("denoiser input validation") {
    Rng rng(3);
    Denoiser d(DenoiserSpec{16, 4, 2, 8}, rng);
    const std::vector<int> t{1};
    CHECK_THROWS_AS(d.predict(Tensor({1, 1, 8, 8}), t, nullptr), InvalidArgument);
    CHECK_THROWS_AS(d.predict(Tensor({1, 2, 16, 16}), t, nullptr), InvalidArgument);
    const std::vector<int> t2{1, 2};
    CHECK_THROWS_AS(d.predict(Tensor({1, 1, 16, 16}), t2, nullptr), InvalidArgument);
    const Tensor r({1, 1, 16, 16});
    CHECK_THROWS_AS(d.predict(r, t, &r), InvalidArgument);
    CHECK_THROWS_AS(Denoiser(DenoiserSpec{20, 4, 3, 8}, rng), InvalidArgument);
    CHECK_THROWS_AS(Denoiser(DenoiserSpec{16, 0, 2, 8}, rng), InvalidArgument);
}

TEST_CASE("control branch is an exact no-op at initialization") {
    Rng rng(4);
    Denoiser d(DenoiserSpec{16, 4, 2, 8}, rng);
    ControlBranch branch(d);
    const Tensor x = oracle::uniform_tensor({3, 1, 16, 16}, rng);
    const Tensor r = oracle::uniform_tensor({3, 1, 16, 16}, rng);
    const std::vector<int> t{1, 50, 999};
    {
        ag::NoGradGuard g;
        const auto res = branch.forward(x, t, r);
        CHECK(res.size() == branch.spec().injection_points.size());
        for (const auto &v : res)
            for (double e : v->value.values()) CHECK(e == 0.0);
    }
    const ControlledDenoiser controlled(d, &branch);
    CHECK(bit_equal(controlled.predict(x, t, &r), d.predict(x, t, nullptr)));

    // Mirrored tensors start as copies of the backbone.
    for (const auto &p : branch.params().list()) {
        if (p.name.rfind("zero_", 0) == 0) {
            for (double e : p.var->value.values()) CHECK(e == 0.0);
            continue;
        }
        bool found = false;
        for (const auto &q : d.params().list())
            if (q.name == p.name) found = bit_equal(q.var->value, p.var->value);
        CHECK(found);
    }
    CHECK_THROWS_AS(branch.forward(x, t, Tensor({3, 1, 8, 8})), InvalidArgument);
}

TEST_CASE("control branch gradients reach the zero projections") {
    Rng rng(5);
    Denoiser d(DenoiserSpec{8, 2, 1, 4}, rng);
    d.params().set_trainable(false);
    ControlBranch branch(d);
    const ControlledDenoiser controlled(d, &branch);
    const Tensor x = oracle::uniform_tensor({2, 1, 8, 8}, rng), r = oracle::uniform_tensor({2, 1, 8, 8}, rng);
    const std::vector<int> t{3, 4};
    auto out = controlled.forward(x, t, &r);
    ag::backward(out, oracle::random_tensor(out->value.shape(), rng));
    for (const auto &p : d.params().list()) CHECK(p.var->grad.empty());
    double zero_grad_mass = 0;
    for (const auto &p : branch.params().list())
        if (p.name.rfind("zero_out", 0) == 0 && !p.var->grad.empty())
            for (double g : p.var->grad.values()) zero_grad_mass += std::abs(g);
    CHECK(zero_grad_mass > 0.0);
}

TEST_CASE("encoder contract") {
    Rng rng(6);
    const EncoderSpec spec{16, 4, 3, 12, 1};
    Encoder e(spec, rng);
    const Tensor x = oracle::uniform_tensor({2, 1, 16, 16}, rng);
    const auto [emb, tap] = e.encode(x);
    CHECK(emb.shape() == std::vector<int>{2, 12});
    CHECK(tap.shape() == std::vector<int>{2, 8});
    const auto [emb2, tap2] = e.encode(x);
    CHECK(bit_equal(emb, emb2));
    CHECK(bit_equal(tap, tap2));

    Tensor dup({2, 1, 16, 16});
    for (int i = 0; i < 256; ++i) dup[i] = dup[256 + i] = x[i];
    const auto [de, dt] = e.encode(dup);
    const std::span<const double> r0(de.data(), 12), r1(de.data() + 12, 12);
    const double cosv = dot(r0, r1) / (l2_norm(r0) * l2_norm(r1));
    CHECK(std::abs(cosv - 1.0) < 1e-12);
    CHECK_THROWS_AS(e.encode(Tensor({1, 1, 8, 8})), InvalidArgument);
    CHECK_THROWS_AS(Encoder(EncoderSpec{16, 4, 3, 12, 3}, rng), InvalidArgument);
    CHECK_THROWS_AS(Encoder(EncoderSpec{16, 4, 3, 0, 1}, rng), InvalidArgument);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
    Rng rng(7);
    Denoiser d(DenoiserSpec{16, 4, 2, 8}, rng);
    const auto bytes = encode_checkpoint(d.to_checkpoint({{"T", 1000}, {"objective", "unitized"}}));
    const auto ck = decode_checkpoint(bytes);
    CHECK(ck.config.at("extra").at("T") == 1000);
    const Denoiser d2 = Denoiser::from_checkpoint(ck);
    CHECK(d2.params().hash() == d.params().hash());
    CHECK(encode_checkpoint(d2.to_checkpoint({{"T", 1000}, {"objective", "unitized"}})) == bytes);

    ControlBranch b(d);
    b.params().list().front().var->value[0] = 0.125;
    const auto b2 = ControlBranch::from_checkpoint(decode_checkpoint(encode_checkpoint(b.to_checkpoint())));
    CHECK(b2.params().hash() == b.params().hash());

    Encoder e(EncoderSpec{16, 4, 2, 8, 0}, rng);
    const auto e2 = Encoder::from_checkpoint(decode_checkpoint(encode_checkpoint(e.to_checkpoint())));
    CHECK(e2.params().hash() == e.params().hash());

    CHECK_THROWS_AS(Encoder::from_checkpoint(ck), LoadError);
    CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), LoadError);
    CHECK_THROWS_AS(decode_checkpoint("NOTACKPT"), LoadError);
    std::string bad = bytes;
    bad[6] = 9;
    CHECK_THROWS_AS(decode_checkpoint(bad), LoadError);
}

TEST_CASE("parameter store hash and freezing") {
    Rng rng(8);
    Denoiser d(DenoiserSpec{8, 2, 1, 4}, rng);
    const auto h = d.params().hash();
    d.params().list()[3].var->value[0] += 1e-12;
    CHECK(d.params().hash() != h);
    d.params().set_trainable(false);
    Adam frozen(d.params(), {});
    CHECK(frozen.state_size() == 0);
    d.params().set_trainable(true);
    Adam live(d.params(), {});
    CHECK(live.state_size() == d.params().list().size());
}

TEST_CASE("adam minimizes a quadratic") {
    ParamStore ps;
    auto w = ps.add("w", Tensor({3}, std::vector<double>{5, -3, 2}));
    AdamOptions o;
    o.lr = 0.05;
    Adam adam(ps, o);
    for (int i = 0; i < 2000; ++i) {
        w->grad = w->value * 2.0;
        adam.step();
    }
    CHECK(l2_norm(w->value.span()) < 1e-2);
    CHECK(w->grad.empty());
}
