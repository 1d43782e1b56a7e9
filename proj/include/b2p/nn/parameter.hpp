#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "b2p/tensor.hpp"

namespace b2p::nn {

// What a tensor is, independent of its name. BitFit and weight decay are
// both defined in terms of roles.
enum class ParamRole {
  kWeight,      // convolution kernels and linear weight matrices
  kBias,
  kNorm,        // normalization scale and offset
  kEmbedding,   // positional embedding, class token
  kLayerScale,
  kBuffer,      // running statistics; never receives gradients
};

const char* role_name(ParamRole r);

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;  // allocated only when trainable
  ParamRole role = ParamRole::kWeight;
  bool trainable = true;
  bool in_backbone = false;

  Parameter() = default;
  Parameter(std::string n, std::vector<int> shape, ParamRole r)
      : name(std::move(n)), value(std::move(shape)), role(r) {}

  bool needs_grad() const { return trainable && role != ParamRole::kBuffer; }
  void ensure_grad() {
    if (needs_grad() && !grad.same_shape(value)) grad = Tensor(value.shape());
  }
};

using ParamRefs = std::vector<Parameter*>;

using Rng = std::mt19937_64;

void init_normal(Tensor& t, float stddev, Rng& rng);
void init_kaiming(Tensor& t, int fan_in, Rng& rng);

}  // namespace b2p::nn
