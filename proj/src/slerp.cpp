#include "sparsebridge/slerp.hpp"

#include <algorithm>
#include <cmath>

#include "sparsebridge/errors.hpp"

namespace sparsebridge {

Tensor slerp(const Tensor &x_i, const Tensor &x_j, double alpha, double parallel_tol) {
    require(x_i.same_shape(x_j), "slerp: shape mismatch " + x_i.shape_string() + " vs " + x_j.shape_string());
    require(alpha >= 0.0 && alpha <= 1.0, "slerp: alpha must lie in [0, 1]");
    const double ni = l2_norm(x_i.span()), nj = l2_norm(x_j.span());
    if (!(ni > 0.0) || !(nj > 0.0)) throw InvalidArgument("slerp: zero-norm input");
    const double theta = std::acos(std::clamp(dot(x_i.span(), x_j.span()) / (ni * nj), -1.0, 1.0));
    double wi = 1.0 - alpha, wj = alpha;
    if (theta >= parallel_tol) {
        const double st = std::sin(theta);
        wi = std::sin((1.0 - alpha) * theta) / st;
        wj = std::sin(alpha * theta) / st;
    }
    Tensor out(x_i.shape());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = wi * x_i[k] + wj * x_j[k];
    return out;
}

} // namespace sparsebridge
