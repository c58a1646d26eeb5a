#include "sparsebridge/tensor.hpp"

#include <cmath>
#include <sstream>

#include "sparsebridge/errors.hpp"

namespace sparsebridge {

std::size_t shape_numel(const std::vector<int> &shape) {
    std::size_t n = 1;
    for (int d : shape) {
        require(d >= 0, "negative tensor dimension");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

Tensor::Tensor(std::vector<int> shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    require(data_.size() == shape_numel(shape_), "tensor data size does not match shape " + shape_string());
}

Tensor Tensor::reshaped(std::vector<int> shape) const {
    require(shape_numel(shape) == size(), "reshape changes element count");
    Tensor out = *this;
    out.shape_ = std::move(shape);
    return out;
}

Tensor &Tensor::operator+=(const Tensor &o) {
    require(same_shape(o), "shape mismatch in +=: " + shape_string() + " vs " + o.shape_string());
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
}

Tensor &Tensor::operator-=(const Tensor &o) {
    require(same_shape(o), "shape mismatch in -=: " + shape_string() + " vs " + o.shape_string());
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
}

Tensor &Tensor::operator*=(double s) {
    for (auto &v : data_) v *= s;
    return *this;
}

std::string Tensor::shape_string() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << ']';
    return os.str();
}

Tensor operator+(Tensor a, const Tensor &b) { return a += b; }
Tensor operator-(Tensor a, const Tensor &b) { return a -= b; }
Tensor operator*(Tensor a, double s) { return a *= s; }
Tensor operator*(double s, Tensor a) { return a *= s; }

double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double dot(std::span<const double> a, std::span<const double> b) {
    require(a.size() == b.size(), "dot: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double max_abs_diff(const Tensor &a, const Tensor &b) {
    require(a.size() == b.size(), "max_abs_diff: size mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

double mean_abs_diff(const Tensor &a, const Tensor &b) {
    require(a.size() == b.size() && a.size() > 0, "mean_abs_diff: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

Tensor stack_slices(const std::vector<Tensor> &slices) {
    require(!slices.empty(), "stack_slices: empty input");
    const auto &s0 = slices.front();
    int h = s0.rank() == 2 ? s0.dim(0) : s0.dim(2);
    int w = s0.rank() == 2 ? s0.dim(1) : s0.dim(3);
    std::size_t per = static_cast<std::size_t>(h) * w;
    Tensor out({static_cast<int>(slices.size()), 1, h, w});
    for (std::size_t n = 0; n < slices.size(); ++n) {
        require(slices[n].size() == per, "stack_slices: slice shape mismatch");
        std::copy(slices[n].data(), slices[n].data() + per, out.data() + n * per);
    }
    return out;
}

Tensor take_sample(const Tensor &batch, int n) {
    require(batch.rank() == 4 && n >= 0 && n < batch.dim(0), "take_sample: bad index");
    Tensor out({1, batch.dim(1), batch.dim(2), batch.dim(3)});
    auto s = batch.sample(n);
    std::copy(s.begin(), s.end(), out.data());
    return out;
}

} // namespace sparsebridge
