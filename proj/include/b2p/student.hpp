#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "b2p/image.hpp"
#include "b2p/nn/layers.hpp"
#include "b2p/nn/vit.hpp"

namespace b2p {

struct ModelConfig {
  int decoder_channels = 256;  // C_dec
  int detail_channels = 64;    // c_d
  int head_channels = 128;     // width of each head's 3×3 block
  int num_classes = 2;         // K
  int input_size = 518;
  nn::NormKind norm = nn::NormKind::kBatch;
  bool bitfit = true;          // backbone biases/norms trainable; otherwise fully frozen
  std::uint64_t init_seed = 0;
  nn::BackboneSpec backbone;

  // Small configuration used by tests and the synthetic benchmark.
  static ModelConfig desk_scale(int input_size = 128);

  void validate() const;  // throws ConfigError
};

struct StudentOutputs {
  Tensor binary_logits;  // (N, 2, H, W)
  Tensor fine_logits;    // (N, K+1, H, W)
};

// Projected backbone activations keyed by tap layer index.
struct FeaturePyramid {
  std::map<int, Tensor> levels;
};

// Conv–Norm–ReLU–Conv–Norm used inside residual fusion.
class FusionBranch {
 public:
  FusionBranch() = default;
  FusionBranch(const std::string& name, int channels, nn::NormKind norm, nn::Rng& rng);
  Tensor forward(const Tensor& x, bool train);
  Tensor backward(const Tensor& dy);
  void collect(nn::ParamRefs& out);

  nn::Conv2d conv1;
  nn::Norm2d norm1;
  nn::ReLU relu;
  nn::Conv2d conv2;
  nn::Norm2d norm2;
};

// F_out = ReLU(phi(F_deep + F_skip) + (F_deep + F_skip)).
template <typename Phi>
Tensor residual_fusion(const Tensor& deep, const Tensor& skip, Phi&& phi) {
  require_same_shape(deep, skip, "residual_fusion");
  Tensor sum = deep;
  add_inplace(sum, skip);
  Tensor out = phi(sum);
  require_same_shape(out, sum, "residual_fusion branch");
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const float v = out[i] + sum[i];
    out[i] = v > 0.0f ? v : 0.0f;
  }
  return out;
}

class ResidualFusionBlock {
 public:
  ResidualFusionBlock() = default;
  ResidualFusionBlock(const std::string& name, int channels, nn::NormKind norm, nn::Rng& rng);
  Tensor forward(const Tensor& deep, const Tensor& skip, bool train);
  // Gradient w.r.t. (F_deep + F_skip), which is also each input's gradient.
  Tensor backward(const Tensor& dy);
  void collect(nn::ParamRefs& out) { branch.collect(out); }

  FusionBranch branch;

 private:
  nn::ReLU out_relu_;
};

// 1×1 conv to 4C channels, sub-pixel shuffle ×2, Norm, ReLU.
class UpsampleStage {
 public:
  UpsampleStage() = default;
  UpsampleStage(const std::string& name, int channels, nn::NormKind norm, nn::Rng& rng);
  Tensor forward(const Tensor& x, bool train);
  Tensor backward(const Tensor& dy);
  void collect(nn::ParamRefs& out);

  nn::Conv2d conv;
  nn::Norm2d norm;
  nn::ReLU relu;
};

// Two stride-2 Conv–Norm–ReLU blocks (ceil-mode output size).
class DetailBranch {
 public:
  DetailBranch() = default;
  DetailBranch(const std::string& name, int channels, nn::NormKind norm, nn::Rng& rng);
  Tensor forward(const Tensor& image, bool train);
  void backward(const Tensor& dy);  // parameter gradients only
  void collect(nn::ParamRefs& out);

  nn::Conv2d conv1;
  nn::Norm2d norm1;
  nn::ReLU relu1;
  nn::Conv2d conv2;
  nn::Norm2d norm2;
  nn::ReLU relu2;
};

// Upsample ×2 → 3×3 Conv–Norm–ReLU → 1×1 conv → upsample ×2 → resize to H×W.
// The 1×1 conv is applied before the second upsampling; both are linear and
// the bilinear weights sum to one, so the order does not change the result.
class PredictionHead {
 public:
  PredictionHead() = default;
  PredictionHead(const std::string& name, int in_ch, int mid_ch, int out_ch, nn::NormKind norm,
                 nn::Rng& rng);
  Tensor forward(const Tensor& x, int out_h, int out_w, bool train);
  Tensor backward(const Tensor& dy);
  void collect(nn::ParamRefs& out);

  nn::Conv2d conv;
  nn::Norm2d norm;
  nn::ReLU relu;
  nn::Conv2d classifier;

 private:
  nn::Resize up1_, up2_, final_;
};

struct ParameterReport {
  std::size_t total = 0;                    // all learnable tensors (buffers excluded)
  std::size_t trainable = 0;
  std::size_t backbone_total = 0;
  std::size_t backbone_trainable = 0;
  std::size_t backbone_weight_matrices_trainable = 0;  // must be 0
  double trainable_ratio() const { return total ? static_cast<double>(trainable) / total : 0.0; }
};

class Student {
 public:
  explicit Student(const ModelConfig& config);
  Student(const Student&) = delete;
  Student& operator=(const Student&) = delete;

  // images: (N, 3, S, S) normalized input at config.input_size.
  StudentOutputs forward(const Tensor& images, bool train);
  void backward(const Tensor& d_binary_logits, const Tensor& d_fine_logits);

  // Stages, exposed individually.
  std::vector<Tensor> extract_features(const Tensor& images, bool train);
  FeaturePyramid project(const std::vector<Tensor>& taps, bool train);
  Tensor fuse_pyramid(const FeaturePyramid& pyramid, int out_h, int out_w, bool train);
  Tensor local_detail_branch(const Tensor& images, bool train);

  const ModelConfig& config() const { return config_; }
  int upsample_stages() const { return static_cast<int>(upsamplers_.size()); }

  // Every tensor of the model (parameters and buffers), stable order.
  const nn::ParamRefs& state() const { return state_; }
  nn::ParamRefs trainable_parameters() const;
  ParameterReport parameter_report() const;
  void zero_grad();

  nn::VitBackbone& backbone() { return backbone_; }
  ResidualFusionBlock& fusion_block(int skip_layer) { return fusion_.at(skip_layer); }

  // Copies values by name; shapes must match.
  void load_state(const std::map<std::string, Tensor>& values);
  std::map<std::string, Tensor> state_values() const;

 private:
  ModelConfig config_;
  nn::VitBackbone backbone_;
  std::vector<nn::Conv2d> projections_;
  std::map<int, ResidualFusionBlock> fusion_;  // keyed by the skip layer
  std::vector<UpsampleStage> upsamplers_;
  nn::Resize global_resize_;
  DetailBranch detail_;
  nn::Conv2d mixer_conv_;
  nn::Norm2d mixer_norm_;
  nn::ReLU mixer_relu_;
  PredictionHead binary_head_;
  PredictionHead fine_head_;
  nn::ParamRefs state_;

  // Bookkeeping for backward.
  std::vector<int> fusion_order_;  // skip layers in the order they were fused
  std::vector<int> pyramid_keys_;
  int quarter_h_ = 0, quarter_w_ = 0;
};

// Backbone normalization statistics (ImageNet mean/std).
inline constexpr float kPixelMean[3] = {0.485f, 0.456f, 0.406f};
inline constexpr float kPixelStd[3] = {0.229f, 0.224f, 0.225f};

// Bilinear resize to size×size and per-channel normalization, written into
// sample `index` of an (N,3,size,size) batch.
void preprocess_into(const RgbImage& image, int size, Tensor& batch, int index);
Tensor preprocess(const RgbImage& image, int size);

}  // namespace b2p
