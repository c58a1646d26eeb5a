#include "sparsebridge/optim.hpp"

#include <cmath>

#include "sparsebridge/errors.hpp"

namespace sparsebridge {

Adam::Adam(const ParamStore &params, AdamOptions opts) : opts_(opts) {
    require(opts.lr > 0.0, "Adam: learning rate must be positive");
    for (const auto &p : params.list()) {
        if (!p.var->requires_grad) continue;
        vars_.push_back(p.var);
        m_.emplace_back(p.var->value.shape());
        v_.emplace_back(p.var->value.shape());
    }
}

void Adam::zero_grad() {
    for (auto &v : vars_) v->grad = Tensor();
}

void Adam::step() {
    ++t_;
    double scale = 1.0;
    if (opts_.clip_norm > 0.0) {
        double sq = 0.0;
        for (const auto &v : vars_)
            for (double g : v->grad.values()) sq += g * g;
        const double norm = std::sqrt(sq);
        if (norm > opts_.clip_norm) scale = opts_.clip_norm / norm;
    }
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < vars_.size(); ++i) {
        auto &var = vars_[i];
        if (var->grad.size() != var->value.size()) continue; // no gradient reached this parameter
        double *w = var->value.data();
        const double *g = var->grad.data();
        double *m = m_[i].data();
        double *v = v_[i].data();
        for (std::size_t k = 0; k < var->value.size(); ++k) {
            const double gk = g[k] * scale;
            m[k] = opts_.beta1 * m[k] + (1.0 - opts_.beta1) * gk;
            v[k] = opts_.beta2 * v[k] + (1.0 - opts_.beta2) * gk * gk;
            w[k] -= opts_.lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + opts_.eps);
        }
    }
    zero_grad();
}

} // namespace sparsebridge
