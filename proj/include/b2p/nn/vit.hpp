#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "b2p/nn/layers.hpp"

namespace b2p::nn {

enum class BackboneKind { kPretrainedVitS14, kTestStub };

std::string backbone_kind_name(BackboneKind k);
BackboneKind parse_backbone_kind(const std::string& name);

struct BackboneSpec {
  BackboneKind kind = BackboneKind::kPretrainedVitS14;
  std::vector<int> tap_layers{1, 2, 4, 7};  // 0-based block indices
  int patch_size = 14;
  int embed_dim = 384;
  int depth = 12;
  int num_heads = 6;
  int mlp_ratio = 4;
  float layer_scale_init = 1.0f;
  std::string weights;  // local checkpoint (safetensors); required for pretrained

  // ViT-S/14 layout; weights supplied separately.
  static BackboneSpec pretrained_vit_s14();
  // Depth-8 random frozen ViT with the same tap/bias/norm structure.
  static BackboneSpec test_stub(int patch_size = 8, int embed_dim = 32);

  void validate() const;  // throws ConfigError
};

class VitBlock {
 public:
  VitBlock() = default;
  VitBlock(const std::string& name, int dim, int heads, int mlp_ratio, float ls_init, Rng& rng);

  Tensor forward(const Tensor& x, bool train);
  Tensor backward(const Tensor& dy);
  void collect(ParamRefs& out);

  LayerNorm norm1;
  MultiHeadAttention attn;
  LayerScale ls1;
  LayerNorm norm2;
  Linear fc1;
  Gelu act;
  Linear fc2;
  LayerScale ls2;
};

// Vision transformer trunk exposing intermediate block outputs as feature
// maps at patch resolution. Blocks past the deepest tap are instantiated
// (they belong to the checkpoint) but never executed.
class VitBackbone {
 public:
  VitBackbone(const BackboneSpec& spec, int input_size, Rng& rng);

  // Images (N,3,S,S) -> one (N, D, Hp, Wp) map per tap, in tap order.
  std::vector<Tensor> forward(const Tensor& images, bool train);
  // Accumulates parameter gradients from per-tap feature gradients.
  void backward(const std::vector<Tensor>& d_taps);
  void collect(ParamRefs& out);

  int grid_h() const { return grid_; }
  int grid_w() const { return grid_; }
  int deepest_tap() const { return spec_.tap_layers.back(); }
  const BackboneSpec& spec() const { return spec_; }

  // Loads a safetensors checkpoint. Accepts Hugging Face DINOv2 names or the
  // internal "backbone.*" names; the positional grid is interpolated when it
  // differs. Throws IoError / ValidationError on missing or mismatched tensors.
  void load_weights(const std::filesystem::path& path);

  Conv2d patch_embed;
  Parameter cls_token;
  Parameter pos_embed;
  std::vector<VitBlock> blocks;
  LayerNorm norm;

 private:
  BackboneSpec spec_;
  int grid_ = 0;
  int batch_ = 0;
};

}  // namespace b2p::nn
