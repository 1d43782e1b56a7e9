#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace b2p {

// Cache-line aligned allocation. Eigen's vectorized reductions peel a
// different number of leading scalars depending on the buffer address, so
// unaligned storage makes sums vary in the last bit from run to run.
template <class T, std::size_t Align = 64>
struct AlignedAllocator {
  using value_type = T;
  template <class U>
  struct rebind {
    using other = AlignedAllocator<U, Align>;
  };
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U, Align>&) {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(Align)));
  }
  void deallocate(T* p, std::size_t) { ::operator delete(p, std::align_val_t(Align)); }
  template <class U>
  bool operator==(const AlignedAllocator<U, Align>&) const { return true; }
};

using FloatBuffer = std::vector<float, AlignedAllocator<float>>;

// Dense row-major float tensor. Image-like tensors use NCHW, token tensors
// use (N, T, D).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, float fill = 0.0f);
  Tensor(std::initializer_list<int> shape, float fill = 0.0f)
      : Tensor(std::vector<int>(shape), fill) {}

  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::span<float> span() { return data_; }
  std::span<const float> span() const { return data_; }
  FloatBuffer& vec() { return data_; }
  const FloatBuffer& vec() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  // NCHW accessors.
  float& at(int n, int c, int h, int w) {
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  float at(int n, int c, int h, int w) const {
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  void fill(float v);
  void zero() { fill(0.0f); }
  // Reinterprets the buffer; element count must be unchanged.
  void reshape(std::vector<int> shape);
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  std::string shape_str() const;

 private:
  std::vector<int> shape_;
  FloatBuffer data_;
};

std::size_t shape_numel(const std::vector<int>& shape);
std::string shape_to_string(const std::vector<int>& shape);

// Throws ValidationError naming `what` when shapes differ.
void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

// a += b elementwise.
void add_inplace(Tensor& a, const Tensor& b);

}  // namespace b2p
