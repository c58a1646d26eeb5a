#pragma once
// Adam over a ParamStore. State is allocated only for parameters that are
// trainable when the optimizer is constructed.

#include <vector>

#include "sparsebridge/nets.hpp"

namespace sparsebridge {

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 0.0; // global gradient-norm clip; 0 disables
};

class Adam {
  public:
    Adam(const ParamStore &params, AdamOptions opts);

    // Applies one update from the accumulated gradients, then clears them.
    void step();
    void zero_grad();
    std::size_t state_size() const { return vars_.size(); }
    AdamOptions &options() { return opts_; }

  private:
    AdamOptions opts_;
    std::vector<ag::Var> vars_;
    std::vector<Tensor> m_, v_;
    long t_ = 0;
};

} // namespace sparsebridge
