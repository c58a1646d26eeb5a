#pragma once
// The three learnable components: the U-shaped noise predictor, the retrieval
// encoder, and the control branch that injects residuals into a frozen
// predictor through zero-initialized 1x1 convolutions.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "sparsebridge/autograd.hpp"
#include "sparsebridge/rng.hpp"
#include "sparsebridge/tensor.hpp"

namespace sparsebridge {

struct Checkpoint;

struct NamedParam {
    std::string name;
    ag::Var var;
};

// Ordered parameter registry. Order is part of the checkpoint contract.
class ParamStore {
  public:
    ag::Var add(std::string name, Tensor init);
    const std::vector<NamedParam> &list() const { return params_; }
    std::vector<ag::Var> vars() const;
    std::size_t scalar_count() const;
    // FNV-1a over names, shapes and raw value bytes.
    std::uint64_t hash() const;
    void set_trainable(bool trainable);
    void zero_grad();
    // Copies values from a store with identical names and shapes.
    void load_values(const std::vector<std::pair<std::string, Tensor>> &values);
    std::vector<std::pair<std::string, Tensor>> snapshot() const;

  private:
    std::vector<NamedParam> params_;
};

struct Conv {
    ag::Var w, b;
    ag::Var operator()(const ag::Var &x) const { return ag::conv2d(x, w, b); }
};

struct Dense {
    ag::Var w, b;
    ag::Var operator()(const ag::Var &x) const { return ag::linear(x, w, b); }
};

// conv -> +time offset -> silu -> conv -> +shortcut -> silu.
struct ResBlock {
    Conv conv_a, conv_b;
    Dense time_proj;
    bool has_shortcut = false;
    Conv shortcut;
    ag::Var operator()(const ag::Var &x, const ag::Var &temb) const;
};

// Sinusoidal features of integer step indices, {N, dim}.
Tensor timestep_features(std::span<const int> t, int dim);

struct DenoiserSpec {
    int image_size = 32;
    int base_channels = 32;
    int depth = 3;
    int time_embed_dim = 64;

    int channels(int level) const;
    void validate() const;
    nlohmann::json to_json() const;
    static DenoiserSpec from_json(const nlohmann::json &j);
};

struct EncoderSpec {
    int image_size = 32;
    int base_channels = 16;
    int stages = 3;
    int embed_dim = 128;
    int feature_tap = 1; // penultimate stage by default

    int channels(int stage) const { return base_channels << stage; }
    void validate() const;
    nlohmann::json to_json() const;
    static EncoderSpec from_json(const nlohmann::json &j);
};

struct ControlBranchSpec {
    DenoiserSpec mirrors;
    // Denoiser stages receiving residuals: skip junctions 0..depth-1, then the bottleneck (index depth).
    std::vector<int> injection_points;

    static ControlBranchSpec for_denoiser(const DenoiserSpec &d);
    void validate() const;
};

class Denoiser;

// Noise predictor interface used by the bridge trainer and samplers.
// `control` is an optional conditioning slice batch routed through a control
// branch; predictors without one reject it.
class NoisePredictor {
  public:
    virtual ~NoisePredictor() = default;
    virtual ag::Var forward(const Tensor &x_t, std::span<const int> t, const Tensor *control) const = 0;
    Tensor predict(const Tensor &x_t, std::span<const int> t, const Tensor *control) const;
};

struct TimeMlp {
    int dim = 0;
    Dense fc1, fc2;
    ag::Var operator()(std::span<const int> t) const;
};

class Denoiser : public NoisePredictor {
  public:
    Denoiser(const DenoiserSpec &spec, Rng &init_rng);

    ag::Var forward(const Tensor &x_t, std::span<const int> t, const Tensor *control) const override;
    // Residuals (if given) are added at the skip junctions and the bottleneck,
    // one per entry of ControlBranchSpec::injection_points.
    ag::Var forward_with_residuals(const Tensor &x_t, std::span<const int> t,
                                   const std::vector<ag::Var> *residuals) const;

    const DenoiserSpec &spec() const { return spec_; }
    ParamStore &params() { return params_; }
    const ParamStore &params() const { return params_; }

    Checkpoint to_checkpoint(const nlohmann::json &extra = {}) const;
    static Denoiser from_checkpoint(const Checkpoint &ckpt);

  private:
    friend class ControlBranch;
    void check_input(const Tensor &x_t, std::span<const int> t) const;

    DenoiserSpec spec_;
    ParamStore params_;
    TimeMlp time_mlp_;
    Conv conv_in_;
    std::vector<ResBlock> down_;
    ResBlock mid_;
    std::vector<ResBlock> up_;
    Conv conv_out_;
};

class ControlBranch {
  public:
    // Trainable copy of the backbone's input conv, time MLP, down blocks and
    // bottleneck, plus zero-initialized input and output projections.
    explicit ControlBranch(const Denoiser &backbone);

    // One residual per injection point; exactly zero at initialization.
    std::vector<ag::Var> forward(const Tensor &x_t, std::span<const int> t, const Tensor &r) const;

    const ControlBranchSpec &spec() const { return spec_; }
    ParamStore &params() { return params_; }
    const ParamStore &params() const { return params_; }

    Checkpoint to_checkpoint(const nlohmann::json &extra = {}) const;
    static ControlBranch from_checkpoint(const Checkpoint &ckpt);

  private:
    ControlBranch(const DenoiserSpec &spec, bool);
    void build(const DenoiserSpec &spec);

    ControlBranchSpec spec_;
    ParamStore params_;
    TimeMlp time_mlp_;
    Conv conv_in_;
    Conv zero_in_;
    std::vector<ResBlock> down_;
    ResBlock mid_;
    std::vector<Conv> zero_out_;
};

// Backbone plus control branch as a single predictor: `control` is the
// reference slice r. With no branch it behaves as the bare backbone.
class ControlledDenoiser : public NoisePredictor {
  public:
    ControlledDenoiser(const Denoiser &backbone, const ControlBranch *branch) : backbone_(backbone), branch_(branch) {}
    ag::Var forward(const Tensor &x_t, std::span<const int> t, const Tensor *control) const override;

  private:
    const Denoiser &backbone_;
    const ControlBranch *branch_;
};

struct Encoding {
    ag::Var embedding;    // {N, embed_dim}; not normalized
    ag::Var tap_features; // {N, channels(feature_tap)}; spatially pooled
};

class Encoder {
  public:
    Encoder(const EncoderSpec &spec, Rng &init_rng);

    Encoding forward(const Tensor &x) const;
    // Inference convenience: {N, D} embeddings and tap features without a graph.
    std::pair<Tensor, Tensor> encode(const Tensor &x) const;

    const EncoderSpec &spec() const { return spec_; }
    ParamStore &params() { return params_; }
    const ParamStore &params() const { return params_; }

    Checkpoint to_checkpoint(const nlohmann::json &extra = {}) const;
    static Encoder from_checkpoint(const Checkpoint &ckpt);

  private:
    EncoderSpec spec_;
    ParamStore params_;
    std::vector<std::pair<Conv, Conv>> stages_;
    Dense head_;
};

} // namespace sparsebridge
