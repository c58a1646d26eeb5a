#pragma once

#include "sparsebridge/tensor.hpp"

namespace sparsebridge {

// Spherical interpolation of two flattened slices:
// [sin((1-a) th) a_i + sin(a th) a_j] / sin th, th = angle between them.
// Falls back to linear interpolation when th < parallel_tol (radians).
Tensor slerp(const Tensor &x_i, const Tensor &x_j, double alpha, double parallel_tol = 1e-6);

} // namespace sparsebridge
