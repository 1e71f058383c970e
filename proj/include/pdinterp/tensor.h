#ifndef PDINTERP_TENSOR_H_
#define PDINTERP_TENSOR_H_

#include <cstddef>
#include <cstdint>
#include <new>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pdinterp/error.h"

namespace pdinterp {

using Index = std::int64_t;
using Shape = std::vector<Index>;

Index shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// Spatial extents in (z, y, x) order.
struct Extent3 {
  Index z = 1;
  Index y = 1;
  Index x = 1;

  Index voxels() const { return z * y * x; }
  Index operator[](int axis) const { return axis == 0 ? z : (axis == 1 ? y : x); }
  friend bool operator==(const Extent3&, const Extent3&) = default;
};

std::string extent_string(const Extent3& e);

// Fixed 64-byte alignment keeps vectorized reductions independent of where
// the allocator places a buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlignment); }

  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) {
    return true;
  }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

// Dense row-major array with up to five axes (batch, channel, z, y, x), x fastest.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  static constexpr int kPrecisionBits = 8 * sizeof(T);

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const { return static_cast<Index>(data_.size()); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* raw() { return data_.data(); }
  const T* raw() const { return data_.data(); }
  std::vector<T> to_vector() const { return std::vector<T>(data_.begin(), data_.end()); }

  T& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

  // Element access for rank-5 (N, C, Z, Y, X) tensors.
  T& at(Index n, Index c, Index z, Index y, Index x) { return data_[offset(n, c, z, y, x)]; }
  const T& at(Index n, Index c, Index z, Index y, Index x) const {
    return data_[offset(n, c, z, y, x)];
  }

  void fill(T value);
  Tensor reshaped(Shape shape) const;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t offset(Index n, Index c, Index z, Index y, Index x) const {
    return static_cast<std::size_t>(
        (((n * shape_[1] + c) * shape_[2] + z) * shape_[3] + y) * shape_[4] + x);
  }

  Shape shape_;
  AlignedVector<T> data_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace pdinterp

#endif  // PDINTERP_TENSOR_H_
