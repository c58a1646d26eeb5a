#pragma once
// Dense row-major double tensor. Image batches use NCHW; a single slice is
// either {H, W} or {1, 1, H, W}.

#include <cstddef>
#include <initializer_list>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace sparsebridge {

// Storage starts on a 64-byte boundary so vectorized kernels peel the same
// way for a given shape regardless of where the heap put the buffer; without
// this, repeated runs in one process can differ in the last bit.
template <class T> struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};
    AlignedAllocator() = default;
    template <class U> AlignedAllocator(const AlignedAllocator<U> &) {}
    T *allocate(std::size_t n) { return static_cast<T *>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T *p, std::size_t) { ::operator delete(p, alignment); }
    template <class U> bool operator==(const AlignedAllocator<U> &) const { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape, double fill = 0.0);
    Tensor(std::vector<int> shape, std::vector<double> data);

    static Tensor zeros_like(const Tensor &t) { return Tensor(t.shape_); }

    const std::vector<int> &shape() const { return shape_; }
    int dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double *data() { return data_.data(); }
    const double *data() const { return data_.data(); }
    Buffer &values() { return data_; }
    const Buffer &values() const { return data_; }
    std::span<double> span() { return data_; }
    std::span<const double> span() const { return data_; }

    double &operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // NCHW accessors; only valid for rank-4 tensors.
    double &at(int n, int c, int h, int w) { return data_[index4(n, c, h, w)]; }
    double at(int n, int c, int h, int w) const { return data_[index4(n, c, h, w)]; }

    Tensor reshaped(std::vector<int> shape) const;
    bool same_shape(const Tensor &o) const { return shape_ == o.shape_; }

    // Leading-dimension view helpers. For rank <= 2 the whole tensor is one sample.
    int batch() const { return rank() <= 2 ? 1 : shape_[0]; }
    std::size_t sample_size() const { return batch() == 0 ? 0 : size() / static_cast<std::size_t>(batch()); }
    std::span<double> sample(int n) { return {data_.data() + n * sample_size(), sample_size()}; }
    std::span<const double> sample(int n) const { return {data_.data() + n * sample_size(), sample_size()}; }

    Tensor &operator+=(const Tensor &o);
    Tensor &operator-=(const Tensor &o);
    Tensor &operator*=(double s);

    std::string shape_string() const;

  private:
    std::size_t index4(int n, int c, int h, int w) const {
        return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
    }

    std::vector<int> shape_;
    Buffer data_;
};

Tensor operator+(Tensor a, const Tensor &b);
Tensor operator-(Tensor a, const Tensor &b);
Tensor operator*(Tensor a, double s);
Tensor operator*(double s, Tensor a);

std::size_t shape_numel(const std::vector<int> &shape);

double l2_norm(std::span<const double> v);
double dot(std::span<const double> a, std::span<const double> b);
double max_abs_diff(const Tensor &a, const Tensor &b);
double mean_abs_diff(const Tensor &a, const Tensor &b);

// Stack equally shaped {H, W} or {1,1,H,W} slices into {N, 1, H, W}.
Tensor stack_slices(const std::vector<Tensor> &slices);
// Extract sample n of an NCHW batch as {1, C, H, W}.
Tensor take_sample(const Tensor &batch, int n);

} // namespace sparsebridge
