#pragma once
// Minimal reverse-mode differentiation over Tensor values.
//
// Each op allocates a Node holding its forward value and, when any input
// requires a gradient and recording is enabled, a closure that pushes the
// node's gradient into its parents. Parameters are leaf nodes whose gradients
// accumulate across backward() calls until the optimizer clears them.

#include <functional>
#include <memory>
#include <vector>

#include "sparsebridge/tensor.hpp"

namespace sparsebridge::ag {

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node &)> backward_fn;

    Tensor &ensure_grad();
};

using Var = std::shared_ptr<Node>;

Var constant(Tensor value);
Var parameter(Tensor value);

bool grad_enabled();

// Disables graph recording for its lifetime (inference, sampling, encoding).
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard &) = delete;
    NoGradGuard &operator=(const NoGradGuard &) = delete;

  private:
    bool previous_;
};

// x: [N,C,H,W], w: [O,C,k,k] with odd k, b: [O]. Stride 1, zero "same" padding.
Var conv2d(const Var &x, const Var &w, const Var &b);
Var add(const Var &a, const Var &b);
// x: [N,C,H,W] plus per-sample channel offsets v: [N,C].
Var add_channel(const Var &x, const Var &v);
Var silu(const Var &x);
Var avg_pool2(const Var &x);
Var upsample2(const Var &x);
Var concat_channels(const Var &a, const Var &b);
// x: [N,D], w: [O,D], b: [O] -> [N,O].
Var linear(const Var &x, const Var &w, const Var &b);
// [N,C,H,W] -> [N,C].
Var global_avg_pool(const Var &x);

// Seeds out->grad with `seed` (same shape as out->value) and propagates.
void backward(const Var &out, const Tensor &seed);
// Multi-root variant: every (output, seed) pair is seeded before a single sweep.
void backward(const std::vector<std::pair<Var, Tensor>> &roots);

} // namespace sparsebridge::ag
