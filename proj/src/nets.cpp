#include "sparsebridge/nets.hpp"

#include <cmath>
#include <cstring>

#include "sparsebridge/checkpoint.hpp"
#include "sparsebridge/errors.hpp"

namespace sparsebridge {

namespace {

Tensor normal_tensor(std::vector<int> shape, double stddev, Rng &rng) {
    Tensor t(std::move(shape));
    rng.fill_normal(t.values());
    t *= stddev;
    return t;
}

Conv make_conv(ParamStore &ps, const std::string &name, int in, int out, int k, double gain, Rng &rng) {
    const double fan_in = static_cast<double>(in) * k * k;
    Conv c;
    c.w = ps.add(name + ".w", normal_tensor({out, in, k, k}, gain / std::sqrt(fan_in), rng));
    c.b = ps.add(name + ".b", Tensor({out}));
    return c;
}

Conv make_zero_conv(ParamStore &ps, const std::string &name, int in, int out) {
    Conv c;
    c.w = ps.add(name + ".w", Tensor({out, in, 1, 1}));
    c.b = ps.add(name + ".b", Tensor({out}));
    return c;
}

Dense make_dense(ParamStore &ps, const std::string &name, int in, int out, double gain, Rng &rng) {
    Dense d;
    d.w = ps.add(name + ".w", normal_tensor({out, in}, gain / std::sqrt(static_cast<double>(in)), rng));
    d.b = ps.add(name + ".b", Tensor({out}));
    return d;
}

ResBlock make_block(ParamStore &ps, const std::string &name, int in, int out, int temb, Rng &rng) {
    ResBlock b;
    b.conv_a = make_conv(ps, name + ".conv_a", in, out, 3, std::sqrt(2.0), rng);
    b.time_proj = make_dense(ps, name + ".time", temb, out, 1.0, rng);
    b.conv_b = make_conv(ps, name + ".conv_b", out, out, 3, 1.0, rng);
    b.has_shortcut = in != out;
    if (b.has_shortcut) b.shortcut = make_conv(ps, name + ".skip", in, out, 1, 1.0, rng);
    return b;
}

TimeMlp make_time_mlp(ParamStore &ps, int dim, Rng &rng) {
    TimeMlp m;
    m.dim = dim;
    m.fc1 = make_dense(ps, "time.fc1", dim, dim, std::sqrt(2.0), rng);
    m.fc2 = make_dense(ps, "time.fc2", dim, dim, 1.0, rng);
    return m;
}

void check_image_batch(const Tensor &x, int size, const char *what) {
    if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != size || x.dim(3) != size || x.dim(0) < 1)
        throw InvalidArgument(std::string(what) + ": expected {N,1," + std::to_string(size) + "," + std::to_string(size) +
                              "}, got " + x.shape_string());
}

std::uint64_t fnv1a(std::uint64_t h, const void *data, std::size_t n) {
    const auto *p = static_cast<const unsigned char *>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace

// ---------------------------------------------------------------- ParamStore

ag::Var ParamStore::add(std::string name, Tensor init) {
    for (const auto &p : params_)
        if (p.name == name) throw InvalidArgument("ParamStore: duplicate parameter " + name);
    auto v = ag::parameter(std::move(init));
    params_.push_back({std::move(name), v});
    return v;
}

std::vector<ag::Var> ParamStore::vars() const {
    std::vector<ag::Var> out;
    out.reserve(params_.size());
    for (const auto &p : params_) out.push_back(p.var);
    return out;
}

std::size_t ParamStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto &p : params_) n += p.var->value.size();
    return n;
}

std::uint64_t ParamStore::hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto &p : params_) {
        h = fnv1a(h, p.name.data(), p.name.size());
        for (int d : p.var->value.shape()) h = fnv1a(h, &d, sizeof d);
        h = fnv1a(h, p.var->value.data(), p.var->value.size() * sizeof(double));
    }
    return h;
}

void ParamStore::set_trainable(bool trainable) {
    for (auto &p : params_) {
        p.var->requires_grad = trainable;
        if (!trainable) p.var->grad = Tensor();
    }
}

void ParamStore::zero_grad() {
    for (auto &p : params_) p.var->grad = Tensor();
}

void ParamStore::load_values(const std::vector<std::pair<std::string, Tensor>> &values) {
    if (values.size() != params_.size())
        throw ShapeMismatchError("parameter count mismatch: expected " + std::to_string(params_.size()) + ", got " +
                                 std::to_string(values.size()));
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto &[name, t] = values[i];
        if (name != params_[i].name) throw ShapeMismatchError("parameter name mismatch: " + name + " vs " + params_[i].name);
        if (!t.same_shape(params_[i].var->value))
            throw ShapeMismatchError("parameter shape mismatch for " + name + ": " + t.shape_string());
        params_[i].var->value = t;
    }
}

std::vector<std::pair<std::string, Tensor>> ParamStore::snapshot() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.reserve(params_.size());
    for (const auto &p : params_) out.emplace_back(p.name, p.var->value);
    return out;
}

// ---------------------------------------------------------------- blocks

ag::Var ResBlock::operator()(const ag::Var &x, const ag::Var &temb) const {
    auto h = conv_a(x);
    h = ag::add_channel(h, time_proj(temb));
    h = ag::silu(h);
    h = conv_b(h);
    auto skip = has_shortcut ? shortcut(x) : x;
    return ag::silu(ag::add(h, skip));
}

Tensor timestep_features(std::span<const int> t, int dim) {
    require(dim >= 2 && dim % 2 == 0, "timestep_features: dim must be even and >= 2");
    const int n = static_cast<int>(t.size());
    const int half = dim / 2;
    Tensor out({n, dim});
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < half; ++k) {
            const double freq = std::exp(-std::log(10000.0) * k / half);
            const double arg = t[i] * freq;
            out[static_cast<std::size_t>(i) * dim + k] = std::sin(arg);
            out[static_cast<std::size_t>(i) * dim + half + k] = std::cos(arg);
        }
    return out;
}

ag::Var TimeMlp::operator()(std::span<const int> t) const {
    auto f = ag::constant(timestep_features(t, dim));
    return fc2(ag::silu(fc1(f)));
}

// ---------------------------------------------------------------- specs

int DenoiserSpec::channels(int level) const { return base_channels << std::min(level, 2); }

void DenoiserSpec::validate() const {
    if (image_size <= 0 || base_channels <= 0 || depth <= 0 || time_embed_dim <= 0)
        throw InvalidArgument("DenoiserSpec: all counts must be positive");
    if (image_size % (1 << depth) != 0)
        throw InvalidArgument("DenoiserSpec: image_size " + std::to_string(image_size) + " not divisible by 2^depth");
    if (time_embed_dim % 2 != 0) throw InvalidArgument("DenoiserSpec: time_embed_dim must be even");
}

nlohmann::json DenoiserSpec::to_json() const {
    return {{"image_size", image_size}, {"base_channels", base_channels}, {"depth", depth}, {"time_embed_dim", time_embed_dim}};
}

DenoiserSpec DenoiserSpec::from_json(const nlohmann::json &j) {
    DenoiserSpec s;
    s.image_size = j.at("image_size");
    s.base_channels = j.at("base_channels");
    s.depth = j.at("depth");
    s.time_embed_dim = j.at("time_embed_dim");
    s.validate();
    return s;
}

void EncoderSpec::validate() const {
    if (image_size <= 0 || base_channels <= 0 || stages <= 0 || embed_dim <= 0)
        throw InvalidArgument("EncoderSpec: all counts must be positive");
    if (feature_tap < 0 || feature_tap >= stages) throw InvalidArgument("EncoderSpec: feature_tap out of range");
    if (image_size % (1 << (stages - 1)) != 0) throw InvalidArgument("EncoderSpec: image_size not divisible by 2^(stages-1)");
}

nlohmann::json EncoderSpec::to_json() const {
    return {{"image_size", image_size}, {"base_channels", base_channels}, {"stages", stages},
            {"embed_dim", embed_dim},   {"feature_tap", feature_tap}};
}

EncoderSpec EncoderSpec::from_json(const nlohmann::json &j) {
    EncoderSpec s;
    s.image_size = j.at("image_size");
    s.base_channels = j.at("base_channels");
    s.stages = j.at("stages");
    s.embed_dim = j.at("embed_dim");
    s.feature_tap = j.at("feature_tap");
    s.validate();
    return s;
}

ControlBranchSpec ControlBranchSpec::for_denoiser(const DenoiserSpec &d) {
    ControlBranchSpec s;
    s.mirrors = d;
    for (int i = 0; i <= d.depth; ++i) s.injection_points.push_back(i);
    return s;
}

void ControlBranchSpec::validate() const {
    mirrors.validate();
    if (injection_points.empty()) throw InvalidArgument("ControlBranchSpec: no injection points");
    for (int p : injection_points)
        if (p < 0 || p > mirrors.depth) throw InvalidArgument("ControlBranchSpec: injection point " + std::to_string(p) + " does not exist");
}

// ---------------------------------------------------------------- Denoiser

Tensor NoisePredictor::predict(const Tensor &x_t, std::span<const int> t, const Tensor *control) const {
    ag::NoGradGuard guard;
    return forward(x_t, t, control)->value;
}

Denoiser::Denoiser(const DenoiserSpec &spec, Rng &rng) : spec_(spec) {
    spec_.validate();
    const int L = spec_.depth, E = spec_.time_embed_dim;
    time_mlp_ = make_time_mlp(params_, E, rng);
    conv_in_ = make_conv(params_, "conv_in", 1, spec_.channels(0), 3, 1.0, rng);
    int prev = spec_.channels(0);
    for (int l = 0; l < L; ++l) {
        down_.push_back(make_block(params_, "down" + std::to_string(l), prev, spec_.channels(l), E, rng));
        prev = spec_.channels(l);
    }
    mid_ = make_block(params_, "mid", prev, prev, E, rng);
    for (int l = L - 1; l >= 0; --l) {
        up_.push_back(make_block(params_, "up" + std::to_string(l), prev + spec_.channels(l), spec_.channels(l), E, rng));
        prev = spec_.channels(l);
    }
    conv_out_ = make_conv(params_, "conv_out", prev, 1, 1, 0.1, rng);
}

void Denoiser::check_input(const Tensor &x_t, std::span<const int> t) const {
    check_image_batch(x_t, spec_.image_size, "denoiser");
    if (static_cast<int>(t.size()) != x_t.dim(0)) throw InvalidArgument("denoiser: one step index per sample required");
}

ag::Var Denoiser::forward(const Tensor &x_t, std::span<const int> t, const Tensor *control) const {
    if (control) throw InvalidArgument("denoiser: control input given but no control branch attached");
    return forward_with_residuals(x_t, t, nullptr);
}

ag::Var Denoiser::forward_with_residuals(const Tensor &x_t, std::span<const int> t,
                                         const std::vector<ag::Var> *residuals) const {
    check_input(x_t, t);
    const int L = spec_.depth;
    if (residuals && static_cast<int>(residuals->size()) != L + 1)
        throw InvalidArgument("denoiser: expected " + std::to_string(L + 1) + " residuals, got " + std::to_string(residuals->size()));

    auto inject = [&](ag::Var h, int idx) {
        if (!residuals) return h;
        const auto &r = (*residuals)[idx];
        if (!r->value.same_shape(h->value))
            throw InvalidArgument("denoiser: residual " + std::to_string(idx) + " has shape " + r->value.shape_string() +
                                  ", expected " + h->value.shape_string());
        return ag::add(h, r);
    };

    auto temb = time_mlp_(t);
    auto h = conv_in_(ag::constant(x_t));
    std::vector<ag::Var> skips;
    for (int l = 0; l < L; ++l) {
        h = down_[l](h, temb);
        skips.push_back(inject(h, l));
        h = ag::avg_pool2(h);
    }
    h = inject(mid_(h, temb), L);
    for (int i = 0; i < L; ++i) {
        const int l = L - 1 - i;
        h = ag::concat_channels(ag::upsample2(h), skips[l]);
        h = up_[i](h, temb);
    }
    return conv_out_(h);
}

Checkpoint Denoiser::to_checkpoint(const nlohmann::json &extra) const {
    Checkpoint c;
    c.kind = "denoiser";
    c.config = {{"spec", spec_.to_json()}, {"extra", extra}};
    c.tensors = params_.snapshot();
    return c;
}

Denoiser Denoiser::from_checkpoint(const Checkpoint &ckpt) {
    if (ckpt.kind != "denoiser") throw LoadError("checkpoint kind '" + ckpt.kind + "' is not a denoiser");
    Rng dummy(0);
    Denoiser d(DenoiserSpec::from_json(ckpt.config.at("spec")), dummy);
    d.params_.load_values(ckpt.tensors);
    return d;
}

// ---------------------------------------------------------------- ControlBranch

ControlBranch::ControlBranch(const DenoiserSpec &spec, bool) { build(spec); }

ControlBranch::ControlBranch(const Denoiser &backbone) {
    build(backbone.spec());
    // Copy every mirrored tensor from the backbone by name; zero projections stay zero.
    for (const auto &p : params_.list()) {
        if (p.name.rfind("zero_", 0) == 0) continue;
        bool found = false;
        for (const auto &q : backbone.params().list())
            if (q.name == p.name) {
                p.var->value = q.var->value;
                found = true;
                break;
            }
        if (!found) throw InvalidArgument("control branch: backbone lacks parameter " + p.name);
    }
}

void ControlBranch::build(const DenoiserSpec &spec) {
    spec_ = ControlBranchSpec::for_denoiser(spec);
    spec_.validate();
    Rng rng(0); // values are overwritten by the backbone copy or a checkpoint
    const int L = spec.depth, E = spec.time_embed_dim;
    time_mlp_ = make_time_mlp(params_, E, rng);
    conv_in_ = make_conv(params_, "conv_in", 1, spec.channels(0), 3, 1.0, rng);
    zero_in_ = make_zero_conv(params_, "zero_in", 1, spec.channels(0));
    int prev = spec.channels(0);
    for (int l = 0; l < L; ++l) {
        down_.push_back(make_block(params_, "down" + std::to_string(l), prev, spec.channels(l), E, rng));
        prev = spec.channels(l);
    }
    mid_ = make_block(params_, "mid", prev, prev, E, rng);
    for (int l = 0; l < L; ++l)
        zero_out_.push_back(make_zero_conv(params_, "zero_out" + std::to_string(l), spec.channels(l), spec.channels(l)));
    zero_out_.push_back(make_zero_conv(params_, "zero_out_mid", prev, prev));
}

std::vector<ag::Var> ControlBranch::forward(const Tensor &x_t, std::span<const int> t, const Tensor &r) const {
    const int size = spec_.mirrors.image_size;
    check_image_batch(x_t, size, "control branch x_t");
    check_image_batch(r, size, "control branch r");
    if (r.dim(0) != x_t.dim(0)) throw InvalidArgument("control branch: r batch size differs from x_t");
    if (static_cast<int>(t.size()) != x_t.dim(0)) throw InvalidArgument("control branch: one step index per sample required");

    const int L = spec_.mirrors.depth;
    auto temb = time_mlp_(t);
    auto h = ag::add(conv_in_(ag::constant(x_t)), zero_in_(ag::constant(r)));
    std::vector<ag::Var> residuals;
    for (int l = 0; l < L; ++l) {
        h = down_[l](h, temb);
        residuals.push_back(zero_out_[l](h));
        h = ag::avg_pool2(h);
    }
    h = mid_(h, temb);
    residuals.push_back(zero_out_[L](h));
    return residuals;
}

Checkpoint ControlBranch::to_checkpoint(const nlohmann::json &extra) const {
    Checkpoint c;
    c.kind = "control_branch";
    c.config = {{"spec", spec_.mirrors.to_json()}, {"extra", extra}};
    c.tensors = params_.snapshot();
    return c;
}

ControlBranch ControlBranch::from_checkpoint(const Checkpoint &ckpt) {
    if (ckpt.kind != "control_branch") throw LoadError("checkpoint kind '" + ckpt.kind + "' is not a control branch");
    ControlBranch b(DenoiserSpec::from_json(ckpt.config.at("spec")), true);
    b.params_.load_values(ckpt.tensors);
    return b;
}

ag::Var ControlledDenoiser::forward(const Tensor &x_t, std::span<const int> t, const Tensor *control) const {
    if (!branch_ || !control) return backbone_.forward_with_residuals(x_t, t, nullptr);
    const auto residuals = branch_->forward(x_t, t, *control);
    return backbone_.forward_with_residuals(x_t, t, &residuals);
}

// ---------------------------------------------------------------- Encoder

Encoder::Encoder(const EncoderSpec &spec, Rng &rng) : spec_(spec) {
    spec_.validate();
    int prev = 1;
    for (int s = 0; s < spec_.stages; ++s) {
        const int c = spec_.channels(s);
        const std::string n = "stage" + std::to_string(s);
        Conv a = make_conv(params_, n + ".conv_a", prev, c, 3, std::sqrt(2.0), rng);
        Conv b = make_conv(params_, n + ".conv_b", c, c, 3, std::sqrt(2.0), rng);
        stages_.emplace_back(a, b);
        prev = c;
    }
    head_ = make_dense(params_, "head", prev, spec_.embed_dim, 1.0, rng);
}

Encoding Encoder::forward(const Tensor &x) const {
    check_image_batch(x, spec_.image_size, "encoder");
    auto h = ag::constant(x);
    ag::Var tap;
    for (int s = 0; s < spec_.stages; ++s) {
        if (s > 0) h = ag::avg_pool2(h);
        h = ag::silu(stages_[s].first(h));
        h = ag::silu(stages_[s].second(h));
        if (s == spec_.feature_tap) tap = ag::global_avg_pool(h);
    }
    return {head_(ag::global_avg_pool(h)), tap};
}

std::pair<Tensor, Tensor> Encoder::encode(const Tensor &x) const {
    ag::NoGradGuard guard;
    auto e = forward(x);
    return {e.embedding->value, e.tap_features->value};
}

Checkpoint Encoder::to_checkpoint(const nlohmann::json &extra) const {
    Checkpoint c;
    c.kind = "encoder";
    c.config = {{"spec", spec_.to_json()}, {"extra", extra}};
    c.tensors = params_.snapshot();
    return c;
}

Encoder Encoder::from_checkpoint(const Checkpoint &ckpt) {
    if (ckpt.kind != "encoder") throw LoadError("checkpoint kind '" + ckpt.kind + "' is not an encoder");
    Rng dummy(0);
    Encoder e(EncoderSpec::from_json(ckpt.config.at("spec")), dummy);
    e.params_.load_values(ckpt.tensors);
    return e;
}

} // namespace sparsebridge
