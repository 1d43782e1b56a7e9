#include "b2p/tensor.hpp"

#include <algorithm>
#include <functional>
#include <numeric>

#include "b2p/error.hpp"

namespace b2p {

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ValidationError("negative tensor dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_to_string(const std::vector<int>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

Tensor::Tensor(std::vector<int> shape, float fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::reshape(std::vector<int> shape) {
  if (shape_numel(shape) != data_.size())
    throw ValidationError("reshape " + shape_str() + " -> " + shape_to_string(shape));
  shape_ = std::move(shape);
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b))
    throw ValidationError(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " +
                          b.shape_str());
}

void add_inplace(Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  float* pa = a.data();
  const float* pb = b.data();
  for (std::size_t i = 0; i < a.numel(); ++i) pa[i] += pb[i];
}

}  // namespace b2p
