#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <new>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "anomalyfactory/errors.hpp"

namespace af {

// 64-byte aligned storage. Vectorised GEMM paths depend on buffer alignment,
// so without this the same computation can round differently run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

// Dense NCHW tensor. Scalars are 1x1x1x1.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(int n, int c, int h, int w, T fill = T(0))
      : shape_{n, c, h, w}, data_(static_cast<std::size_t>(n) * c * h * w, fill) {}
  explicit Tensor(std::array<int, 4> shape, T fill = T(0))
      : Tensor(shape[0], shape[1], shape[2], shape[3], fill) {}

  static Tensor scalar(T v) { return Tensor(1, 1, 1, 1, v); }

  int n() const noexcept { return shape_[0]; }
  int c() const noexcept { return shape_[1]; }
  int h() const noexcept { return shape_[2]; }
  int w() const noexcept { return shape_[3]; }
  const std::array<int, 4>& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t plane() const noexcept { return static_cast<std::size_t>(shape_[2]) * shape_[3]; }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(int n, int c, int y, int x) noexcept { return data_[index(n, c, y, x)]; }
  const T& at(int n, int c, int y, int x) const noexcept { return data_[index(n, c, y, x)]; }

  std::size_t index(int n, int c, int y, int x) const noexcept {
    return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x;
  }

  T item() const {
    if (data_.size() != 1) throw ContractError("item() on non-scalar tensor " + shape_string());
    return data_[0];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const noexcept { return shape_ == o.shape_; }

  std::string shape_string() const {
    std::ostringstream os;
    os << '[' << shape_[0] << ',' << shape_[1] << ',' << shape_[2] << ',' << shape_[3] << ']';
    return os.str();
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  // Copies sample `i` of the batch into a new 1xCxHxW tensor.
  Tensor sample(int i) const {
    Tensor out(1, c(), h(), w());
    const std::size_t stride = static_cast<std::size_t>(c()) * plane();
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(i * stride), stride, out.data_.begin());
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::array<int, 4> shape_{0, 0, 0, 0};
  AlignedVector<T> data_;
};

// Stacks 1xCxHxW tensors along the batch axis.
template <typename T>
Tensor<T> stack(std::span<const Tensor<T>> items) {
  if (items.empty()) return {};
  const auto& first = items.front();
  Tensor<T> out(static_cast<int>(items.size()), first.c(), first.h(), first.w());
  const std::size_t stride = static_cast<std::size_t>(first.c()) * first.plane();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].n() != 1 || items[i].c() != first.c() || items[i].h() != first.h() ||
        items[i].w() != first.w())
      throw ContractError("stack: mismatched item shape " + items[i].shape_string());
    std::copy_n(items[i].data(), stride, out.data() + i * stride);
  }
  return out;
}

template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& items) {
  return stack(std::span<const Tensor<T>>(items));
}

}  // namespace af
