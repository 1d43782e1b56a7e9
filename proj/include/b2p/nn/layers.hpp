#pragma once

#include <string>
#include <vector>

#include "b2p/nn/parameter.hpp"

namespace b2p::nn {

// Every layer caches what its backward needs only when forward ran with
// train == true. Parameter gradients accumulate into Parameter::grad.

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, int in_ch, int out_ch, int kernel, int stride, int pad, bool bias,
         Rng& rng);

  Tensor forward(const Tensor& x, bool train);
  // Returns dL/dx unless need_input_grad is false (then an empty tensor).
  Tensor backward(const Tensor& dy, bool need_input_grad = true);
  void collect(ParamRefs& out);

  Parameter weight;
  Parameter bias;
  int in_ch = 0, out_ch = 0, kernel = 1, stride = 1, pad = 0;
  bool has_bias = false;

  static int out_size(int in, int kernel, int stride, int pad) {
    return (in + 2 * pad - kernel) / stride + 1;
  }

 private:
  Tensor input_;
};

enum class NormKind { kBatch, kGroup };

// Per-channel affine normalization over (N,H,W) (batch) or over channel
// groups within each sample (group).
class Norm2d {
 public:
  Norm2d() = default;
  Norm2d(std::string name, int channels, NormKind kind, int groups = 8);

  Tensor forward(const Tensor& x, bool train);
  Tensor backward(const Tensor& dy);
  void collect(ParamRefs& out);

  Parameter gamma;
  Parameter beta;
  Parameter running_mean;
  Parameter running_var;
  NormKind kind = NormKind::kBatch;
  int channels = 0;
  int groups = 1;
  float momentum = 0.1f;
  float eps = 1e-5f;

 private:
  Tensor xhat_;
  FloatBuffer inv_std_;  // per reduction set
  bool used_batch_stats_ = false;
};

class ReLU {
 public:
  Tensor forward(const Tensor& x, bool train);
  Tensor backward(const Tensor& dy);

 private:
  std::vector<std::uint8_t> mask_;
};

// (N, 4C, H, W) -> (N, C, 2H, 2W), PyTorch channel ordering.
Tensor pixel_shuffle(const Tensor& x, int r);
Tensor pixel_unshuffle(const Tensor& y, int r);

// Bilinear resize with half-pixel centres (align_corners = false).
class Resize {
 public:
  Tensor forward(const Tensor& x, int out_h, int out_w, bool train);
  Tensor backward(const Tensor& dy);

 private:
  std::vector<int> in_shape_;
};

Tensor resize_bilinear(const Tensor& x, int out_h, int out_w);
Tensor resize_bilinear_backward(const Tensor& dy, int in_h, int in_w);

// Channel concatenation of two NCHW tensors and its inverse.
Tensor concat_channels(const Tensor& a, const Tensor& b);
void split_channels(const Tensor& d, int ca, Tensor& da, Tensor& db);

// ---- token layers, shape (N, T, D) ----

class Linear {
 public:
  Linear() = default;
  Linear(std::string name, int in_dim, int out_dim, bool bias, Rng& rng, float init_std = 0.02f);

  Tensor forward(const Tensor& x, bool train);
  Tensor backward(const Tensor& dy);
  void collect(ParamRefs& out);

  Parameter weight;  // (out, in)
  Parameter bias;
  int in_dim = 0, out_dim = 0;
  bool has_bias = false;

 private:
  Tensor input_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(std::string name, int dim, float eps = 1e-6f);

  Tensor forward(const Tensor& x, bool train);
  Tensor backward(const Tensor& dy);
  void collect(ParamRefs& out);

  Parameter gamma;
  Parameter beta;
  int dim = 0;
  float eps = 1e-6f;

 private:
  Tensor xhat_;
  FloatBuffer inv_std_;
};

class Gelu {
 public:
  Tensor forward(const Tensor& x, bool train);
  Tensor backward(const Tensor& dy);

 private:
  Tensor input_;
};

class LayerScale {
 public:
  LayerScale() = default;
  LayerScale(std::string name, int dim, float init);

  Tensor forward(const Tensor& x, bool train);
  Tensor backward(const Tensor& dy);
  void collect(ParamRefs& out);

  Parameter gamma;

 private:
  Tensor input_;
};

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, int dim, int heads, Rng& rng);

  Tensor forward(const Tensor& x, bool train);
  Tensor backward(const Tensor& dy);
  void collect(ParamRefs& out);

  Linear query, key, value, proj;
  int dim = 0, heads = 1;

 private:
  Tensor q_, k_, v_, attn_;  // attn_: (N, heads, T, T)
};

}  // namespace b2p::nn
