#include "b2p/student.hpp"

#include <algorithm>
#include <cmath>
#include <regex>

#include "b2p/error.hpp"

namespace b2p {

using nn::Conv2d;
using nn::Norm2d;
using nn::ParamRefs;
using nn::ParamRole;

ModelConfig ModelConfig::desk_scale(int input_size) {
  ModelConfig c;
  c.decoder_channels = 32;
  c.detail_channels = 16;
  c.head_channels = 16;
  c.input_size = input_size;
  c.backbone = nn::BackboneSpec::test_stub(8, 32);
  return c;
}

void ModelConfig::validate() const {
  if (decoder_channels < 1 || detail_channels < 1 || head_channels < 1)
    throw ConfigError("model channel widths must be positive");
  if (num_classes < 1) throw ConfigError("model.num_classes must be >= 1");
  if (num_classes > 254) throw ConfigError("model.num_classes must be <= 254");
  // Stride-2 stages round up, so any size of at least 4 survives both.
  if (input_size < 4) throw ConfigError("model.input_size must be at least 4");
  backbone.validate();
  if (input_size / backbone.patch_size < 1) throw ConfigError("input_size smaller than a patch");
}

// ---------------------------------------------------------------------------

FusionBranch::FusionBranch(const std::string& name, int c, nn::NormKind norm, nn::Rng& rng)
    : conv1(name + ".conv1", c, c, 3, 1, 1, false, rng), norm1(name + ".norm1", c, norm),
      conv2(name + ".conv2", c, c, 3, 1, 1, false, rng), norm2(name + ".norm2", c, norm) {}

Tensor FusionBranch::forward(const Tensor& x, bool train) {
  return norm2.forward(conv2.forward(relu.forward(norm1.forward(conv1.forward(x, train), train), train), train), train);
}

Tensor FusionBranch::backward(const Tensor& dy) {
  return conv1.backward(norm1.backward(relu.backward(conv2.backward(norm2.backward(dy)))));
}

void FusionBranch::collect(ParamRefs& out) {
  conv1.collect(out);
  norm1.collect(out);
  conv2.collect(out);
  norm2.collect(out);
}

ResidualFusionBlock::ResidualFusionBlock(const std::string& name, int c, nn::NormKind norm,
                                         nn::Rng& rng)
    : branch(name + ".phi", c, norm, rng) {}

Tensor ResidualFusionBlock::forward(const Tensor& deep, const Tensor& skip, bool train) {
  require_same_shape(deep, skip, "residual fusion");
  Tensor sum = deep;
  add_inplace(sum, skip);
  Tensor y = branch.forward(sum, train);
  add_inplace(y, sum);
  return out_relu_.forward(y, train);
}

Tensor ResidualFusionBlock::backward(const Tensor& dy) {
  const Tensor d_pre = out_relu_.backward(dy);
  Tensor ds = branch.backward(d_pre);
  add_inplace(ds, d_pre);
  return ds;
}

UpsampleStage::UpsampleStage(const std::string& name, int c, nn::NormKind norm, nn::Rng& rng)
    : conv(name + ".conv", c, 4 * c, 1, 1, 0, false, rng), norm(name + ".norm", c, norm) {}

Tensor UpsampleStage::forward(const Tensor& x, bool train) {
  return relu.forward(norm.forward(nn::pixel_shuffle(conv.forward(x, train), 2), train), train);
}

Tensor UpsampleStage::backward(const Tensor& dy) {
  return conv.backward(nn::pixel_unshuffle(norm.backward(relu.backward(dy)), 2));
}

void UpsampleStage::collect(ParamRefs& out) {
  conv.collect(out);
  norm.collect(out);
}

DetailBranch::DetailBranch(const std::string& name, int c, nn::NormKind norm, nn::Rng& rng)
    : conv1(name + ".conv1", 3, c, 3, 2, 1, false, rng), norm1(name + ".norm1", c, norm),
      conv2(name + ".conv2", c, c, 3, 2, 1, false, rng), norm2(name + ".norm2", c, norm) {}

Tensor DetailBranch::forward(const Tensor& image, bool train) {
  Tensor h = relu1.forward(norm1.forward(conv1.forward(image, train), train), train);
  return relu2.forward(norm2.forward(conv2.forward(h, train), train), train);
}

void DetailBranch::backward(const Tensor& dy) {
  const Tensor dh = conv2.backward(norm2.backward(relu2.backward(dy)));
  conv1.backward(norm1.backward(relu1.backward(dh)), false);
}

void DetailBranch::collect(ParamRefs& out) {
  conv1.collect(out);
  norm1.collect(out);
  conv2.collect(out);
  norm2.collect(out);
}

PredictionHead::PredictionHead(const std::string& name, int in_ch, int mid_ch, int out_ch,
                               nn::NormKind norm_kind, nn::Rng& rng)
    : conv(name + ".conv", in_ch, mid_ch, 3, 1, 1, false, rng),
      norm(name + ".norm", mid_ch, norm_kind),
      classifier(name + ".classifier", mid_ch, out_ch, 1, 1, 0, true, rng) {}

Tensor PredictionHead::forward(const Tensor& x, int out_h, int out_w, bool train) {
  const int h = x.dim(2), w = x.dim(3);
  Tensor u = up1_.forward(x, 2 * h, 2 * w, train);
  Tensor c = relu.forward(norm.forward(conv.forward(u, train), train), train);
  Tensor logits = classifier.forward(c, train);
  Tensor u2 = up2_.forward(logits, 4 * h, 4 * w, train);
  return final_.forward(u2, out_h, out_w, train);
}

Tensor PredictionHead::backward(const Tensor& dy) {
  Tensor d = up2_.backward(final_.backward(dy));
  d = conv.backward(norm.backward(relu.backward(classifier.backward(d))));
  return up1_.backward(d);
}

void PredictionHead::collect(ParamRefs& out) {
  conv.collect(out);
  norm.collect(out);
  classifier.collect(out);
}

// ---------------------------------------------------------------------------

namespace {

nn::Rng seeded(std::uint64_t seed) { return nn::Rng(seed ^ 0x5eed5eed5eedULL); }

int block_index(const std::string& name) {
  static const std::regex re(R"(^backbone\.blocks\.(\d+)\.)");
  std::smatch m;
  if (std::regex_search(name, m, re)) return std::stoi(m[1].str());
  return -1;
}

}  // namespace

Student::Student(const ModelConfig& config)
    : config_((config.validate(), config)),
      backbone_([&] {
        nn::Rng rng = seeded(config.init_seed);
        return nn::VitBackbone(config.backbone, config.input_size, rng);
      }()) {
  if (!config_.backbone.weights.empty()) backbone_.load_weights(config_.backbone.weights);
  nn::Rng rng = seeded(config_.init_seed + 1);
  const int c = config_.decoder_channels;
  const auto norm = config_.norm;
  const auto& taps = config_.backbone.tap_layers;
  for (int t : taps)
    projections_.emplace_back("decoder.proj." + std::to_string(t), config_.backbone.embed_dim, c, 1,
                              1, 0, true, rng);
  for (std::size_t i = 0; i + 1 < taps.size(); ++i)
    fusion_.emplace(taps[i], ResidualFusionBlock("decoder.fusion." + std::to_string(taps[i]), c, norm, rng));
  const int grid = backbone_.grid_h();
  const int quarter = (config_.input_size + 3) / 4;
  for (int g = grid, i = 0; g < quarter; g *= 2, ++i)
    upsamplers_.emplace_back("decoder.upsample." + std::to_string(i), c, norm, rng);
  detail_ = DetailBranch("detail", config_.detail_channels, norm, rng);
  mixer_conv_ = Conv2d("mixer.conv", c + config_.detail_channels, c, 3, 1, 1, false, rng);
  mixer_norm_ = Norm2d("mixer.norm", c, norm);
  binary_head_ = PredictionHead("head.binary", c, config_.head_channels, 2, norm, rng);
  fine_head_ = PredictionHead("head.fine", c, config_.head_channels, config_.num_classes + 1, norm, rng);

  backbone_.collect(state_);
  const std::size_t backbone_count = state_.size();
  for (auto& p : projections_) p.collect(state_);
  for (auto& [k, f] : fusion_) f.collect(state_);
  for (auto& u : upsamplers_) u.collect(state_);
  detail_.collect(state_);
  mixer_conv_.collect(state_);
  mixer_norm_.collect(state_);
  binary_head_.collect(state_);
  fine_head_.collect(state_);

  const int deepest = backbone_.deepest_tap();
  for (std::size_t i = 0; i < state_.size(); ++i) {
    nn::Parameter* p = state_[i];
    if (p->role == ParamRole::kBuffer) {
      p->trainable = false;
      continue;
    }
    if (i < backbone_count) {
      p->in_backbone = true;
      const bool adaptable = p->role == ParamRole::kBias || p->role == ParamRole::kNorm;
      // Blocks after the deepest tap and the final norm never influence the
      // output, so they are left frozen.
      const int blk = block_index(p->name);
      const bool reachable = p->name.starts_with("backbone.patch_embed") ||
                             (blk >= 0 && blk <= deepest);
      p->trainable = config_.bitfit && adaptable && reachable;
    } else {
      p->trainable = true;
    }
    p->ensure_grad();
  }
}

std::vector<Tensor> Student::extract_features(const Tensor& images, bool train) {
  return backbone_.forward(images, train);
}

FeaturePyramid Student::project(const std::vector<Tensor>& taps, bool train) {
  const auto& layers = config_.backbone.tap_layers;
  if (taps.size() != layers.size()) throw ValidationError("project: tap count mismatch");
  FeaturePyramid pyr;
  for (std::size_t i = 0; i < taps.size(); ++i)
    pyr.levels[layers[i]] = projections_[i].forward(taps[i], train);
  return pyr;
}

Tensor Student::fuse_pyramid(const FeaturePyramid& pyramid, int out_h, int out_w, bool train) {
  if (pyramid.levels.empty()) throw ValidationError("fuse_pyramid: empty pyramid");
  pyramid_keys_.clear();
  fusion_order_.clear();
  auto it = pyramid.levels.rbegin();
  Tensor deep = it->second;
  pyramid_keys_.push_back(it->first);
  for (++it; it != pyramid.levels.rend(); ++it) {
    auto block = fusion_.find(it->first);
    if (block == fusion_.end())
      throw ValidationError("fuse_pyramid: no fusion block for layer " + std::to_string(it->first));
    deep = block->second.forward(deep, it->second, train);
    fusion_order_.push_back(it->first);
    pyramid_keys_.push_back(it->first);
  }
  for (auto& u : upsamplers_) deep = u.forward(deep, train);
  return global_resize_.forward(deep, out_h, out_w, train);
}

Tensor Student::local_detail_branch(const Tensor& images, bool train) {
  return detail_.forward(images, train);
}

StudentOutputs Student::forward(const Tensor& images, bool train) {
  if (images.rank() != 4 || images.dim(1) != 3)
    throw ValidationError("student input must be (N,3,H,W), got " + images.shape_str());
  const int h = images.dim(2), w = images.dim(3);
  quarter_h_ = (h + 3) / 4;
  quarter_w_ = (w + 3) / 4;
  const auto taps = extract_features(images, train);
  const FeaturePyramid pyr = project(taps, train);
  const Tensor global = fuse_pyramid(pyr, quarter_h_, quarter_w_, train);
  const Tensor local = local_detail_branch(images, train);
  if (local.dim(2) != global.dim(2) || local.dim(3) != global.dim(3))
    throw ValidationError("branch shape disagreement: global " + global.shape_str() + " vs local " +
                          local.shape_str());
  const Tensor fused = mixer_relu_.forward(
      mixer_norm_.forward(mixer_conv_.forward(nn::concat_channels(global, local), train), train), train);
  StudentOutputs out;
  out.binary_logits = binary_head_.forward(fused, h, w, train);
  out.fine_logits = fine_head_.forward(fused, h, w, train);
  return out;
}

void Student::backward(const Tensor& d_binary, const Tensor& d_fine) {
  Tensor d_fused = binary_head_.backward(d_binary);
  add_inplace(d_fused, fine_head_.backward(d_fine));
  const Tensor d_cat = mixer_conv_.backward(mixer_norm_.backward(mixer_relu_.backward(d_fused)));
  Tensor d_global, d_local;
  nn::split_channels(d_cat, config_.decoder_channels, d_global, d_local);
  detail_.backward(d_local);

  Tensor d = global_resize_.backward(d_global);
  for (auto it = upsamplers_.rbegin(); it != upsamplers_.rend(); ++it) d = it->backward(d);
  // d is now the gradient of the final F_deep. Walk the fusion chain back.
  std::map<int, Tensor> d_levels;
  for (auto it = fusion_order_.rbegin(); it != fusion_order_.rend(); ++it) {
    Tensor ds = fusion_.at(*it).backward(d);
    d_levels[*it] = ds;
    d = std::move(ds);
  }
  d_levels[pyramid_keys_.front()] = std::move(d);

  const auto& layers = config_.backbone.tap_layers;
  const bool backbone_trains = config_.bitfit;
  std::vector<Tensor> d_taps(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto found = d_levels.find(layers[i]);
    if (found == d_levels.end()) throw ValidationError("backward: missing pyramid level");
    d_taps[i] = projections_[i].backward(found->second, backbone_trains);
  }
  if (backbone_trains) backbone_.backward(d_taps);
}

nn::ParamRefs Student::trainable_parameters() const {
  ParamRefs out;
  for (auto* p : state_)
    if (p->needs_grad()) out.push_back(p);
  return out;
}

ParameterReport Student::parameter_report() const {
  ParameterReport r;
  for (auto* p : state_) {
    if (p->role == ParamRole::kBuffer) continue;
    const std::size_t n = p->value.numel();
    r.total += n;
    if (p->needs_grad()) r.trainable += n;
    if (p->in_backbone) {
      r.backbone_total += n;
      if (p->needs_grad()) {
        r.backbone_trainable += n;
        if (p->role == ParamRole::kWeight) r.backbone_weight_matrices_trainable += n;
      }
    }
  }
  return r;
}

void Student::zero_grad() {
  for (auto* p : state_)
    if (p->needs_grad()) p->grad.zero();
}

void Student::load_state(const std::map<std::string, Tensor>& values) {
  for (auto* p : state_) {
    auto it = values.find(p->name);
    if (it == values.end()) throw ValidationError("state is missing tensor " + p->name);
    if (it->second.numel() != p->value.numel())
      throw ValidationError("state tensor " + p->name + " has shape " + it->second.shape_str() +
                            ", model expects " + p->value.shape_str());
    std::copy(it->second.vec().begin(), it->second.vec().end(), p->value.vec().begin());
  }
}

std::map<std::string, Tensor> Student::state_values() const {
  std::map<std::string, Tensor> out;
  for (auto* p : state_) out.emplace(p->name, p->value);
  return out;
}

void preprocess_into(const RgbImage& image, int size, Tensor& batch, int index) {
  const double sx = static_cast<double>(image.width) / size;
  const double sy = static_cast<double>(image.height) / size;
  for (int y = 0; y < size; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    if (fy < 0) fy = 0;
    const int y0 = std::min(static_cast<int>(fy), image.height - 1);
    const int y1 = std::min(y0 + 1, image.height - 1);
    const double ly = fy - y0;
    for (int x = 0; x < size; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      if (fx < 0) fx = 0;
      const int x0 = std::min(static_cast<int>(fx), image.width - 1);
      const int x1 = std::min(x0 + 1, image.width - 1);
      const double lx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double v = (1 - ly) * ((1 - lx) * image.at(x0, y0)[c] + lx * image.at(x1, y0)[c]) +
                         ly * ((1 - lx) * image.at(x0, y1)[c] + lx * image.at(x1, y1)[c]);
        batch.at(index, c, y, x) = static_cast<float>((v / 255.0 - kPixelMean[c]) / kPixelStd[c]);
      }
    }
  }
}

Tensor preprocess(const RgbImage& image, int size) {
  Tensor t({1, 3, size, size});
  preprocess_into(image, size, t, 0);
  return t;
}

}  // namespace b2p
