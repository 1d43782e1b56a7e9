#include "b2p/nn/vit.hpp"

#include <algorithm>
#include <map>
#include <regex>

#include "b2p/error.hpp"
#include "b2p/safetensors.hpp"

namespace b2p::nn {

std::string backbone_kind_name(BackboneKind k) {
  return k == BackboneKind::kTestStub ? "test_stub" : "pretrained_vit_s14";
}

BackboneKind parse_backbone_kind(const std::string& name) {
  if (name == "test_stub") return BackboneKind::kTestStub;
  if (name == "pretrained_vit_s14") return BackboneKind::kPretrainedVitS14;
  throw ConfigError("unknown backbone kind '" + name + "'");
}

BackboneSpec BackboneSpec::pretrained_vit_s14() { return BackboneSpec{}; }

BackboneSpec BackboneSpec::test_stub(int patch_size, int embed_dim) {
  BackboneSpec s;
  s.kind = BackboneKind::kTestStub;
  s.patch_size = patch_size;
  s.embed_dim = embed_dim;
  s.depth = 8;
  s.num_heads = 2;
  s.mlp_ratio = 2;
  s.layer_scale_init = 0.1f;
  return s;
}

void BackboneSpec::validate() const {
  if (tap_layers.empty()) throw ConfigError("backbone.tap_layers is empty");
  for (std::size_t i = 0; i < tap_layers.size(); ++i) {
    if (tap_layers[i] < 0) throw ConfigError("backbone.tap_layers has a negative index");
    if (i && tap_layers[i] <= tap_layers[i - 1])
      throw ConfigError("backbone.tap_layers must be strictly increasing");
    if (tap_layers[i] >= depth)
      throw ConfigError("tap layer " + std::to_string(tap_layers[i]) + " >= backbone depth " +
                        std::to_string(depth));
  }
  if (patch_size < 1 || embed_dim < 1 || num_heads < 1 || mlp_ratio < 1)
    throw ConfigError("backbone dimensions must be positive");
  if (embed_dim % num_heads) throw ConfigError("backbone.embed_dim must divide by num_heads");
}

VitBlock::VitBlock(const std::string& name, int dim, int heads, int mlp_ratio, float ls_init,
                   Rng& rng)
    : norm1(name + ".norm1", dim), attn(name + ".attn", dim, heads, rng),
      ls1(name + ".ls1", dim, ls_init), norm2(name + ".norm2", dim),
      fc1(name + ".mlp.fc1", dim, dim * mlp_ratio, true, rng),
      fc2(name + ".mlp.fc2", dim * mlp_ratio, dim, true, rng), ls2(name + ".ls2", dim, ls_init) {}

void VitBlock::collect(ParamRefs& out) {
  norm1.collect(out);
  attn.collect(out);
  ls1.collect(out);
  norm2.collect(out);
  fc1.collect(out);
  fc2.collect(out);
  ls2.collect(out);
}

Tensor VitBlock::forward(const Tensor& x, bool train) {
  Tensor h = ls1.forward(attn.forward(norm1.forward(x, train), train), train);
  add_inplace(h, x);
  Tensor m = ls2.forward(fc2.forward(act.forward(fc1.forward(norm2.forward(h, train), train), train), train), train);
  add_inplace(m, h);
  return m;
}

Tensor VitBlock::backward(const Tensor& dy) {
  Tensor dh = norm2.backward(fc1.backward(act.backward(fc2.backward(ls2.backward(dy)))));
  add_inplace(dh, dy);
  Tensor dx = norm1.backward(attn.backward(ls1.backward(dh)));
  add_inplace(dx, dh);
  return dx;
}

VitBackbone::VitBackbone(const BackboneSpec& spec, int input_size, Rng& rng) : spec_(spec) {
  spec_.validate();
  const int d = spec_.embed_dim;
  grid_ = input_size / spec_.patch_size;
  if (grid_ < 1) throw ConfigError("input_size smaller than one backbone patch");
  patch_embed = Conv2d("backbone.patch_embed", 3, d, spec_.patch_size, spec_.patch_size, 0, true, rng);
  cls_token = Parameter("backbone.cls_token", {1, d}, ParamRole::kEmbedding);
  pos_embed = Parameter("backbone.pos_embed", {1 + grid_ * grid_, d}, ParamRole::kEmbedding);
  init_normal(cls_token.value, 0.02f, rng);
  init_normal(pos_embed.value, 0.02f, rng);
  for (int i = 0; i < spec_.depth; ++i)
    blocks.emplace_back("backbone.blocks." + std::to_string(i), d, spec_.num_heads, spec_.mlp_ratio,
                        spec_.layer_scale_init, rng);
  norm = LayerNorm("backbone.norm", d);
}

void VitBackbone::collect(ParamRefs& out) {
  patch_embed.collect(out);
  out.push_back(&cls_token);
  out.push_back(&pos_embed);
  for (auto& b : blocks) b.collect(out);
  norm.collect(out);
}

std::vector<Tensor> VitBackbone::forward(const Tensor& images, bool train) {
  const int n = images.dim(0), d = spec_.embed_dim, p = grid_ * grid_;
  const int crop = grid_ * spec_.patch_size;
  Tensor input = images;
  if (images.dim(2) != crop || images.dim(3) != crop) {
    if (images.dim(2) < crop || images.dim(3) < crop)
      throw ValidationError("backbone input smaller than the configured input size");
    input = Tensor({n, 3, crop, crop});
    for (int b = 0; b < n; ++b)
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < crop; ++y)
          for (int x = 0; x < crop; ++x) input.at(b, c, y, x) = images.at(b, c, y, x);
  }
  const Tensor pe = patch_embed.forward(input, train);
  if (pe.dim(2) != grid_ || pe.dim(3) != grid_)
    throw ValidationError("backbone input does not match the configured input size");
  Tensor x({n, 1 + p, d});
  for (int b = 0; b < n; ++b) {
    float* tok = x.data() + static_cast<std::size_t>(b) * (1 + p) * d;
    for (int c = 0; c < d; ++c) tok[c] = cls_token.value[static_cast<std::size_t>(c)] + pos_embed.value[static_cast<std::size_t>(c)];
    for (int c = 0; c < d; ++c) {
      const float* plane = pe.data() + (static_cast<std::size_t>(b) * d + c) * p;
      for (int i = 0; i < p; ++i)
        tok[static_cast<std::size_t>(1 + i) * d + c] =
            plane[i] + pos_embed.value[static_cast<std::size_t>(1 + i) * d + c];
    }
  }
  std::vector<Tensor> taps;
  std::size_t next_tap = 0;
  for (int i = 0; i <= deepest_tap(); ++i) {
    x = blocks[static_cast<std::size_t>(i)].forward(x, train);
    if (spec_.tap_layers[next_tap] == i) {
      Tensor f({n, d, grid_, grid_});
      for (int b = 0; b < n; ++b) {
        const float* tok = x.data() + static_cast<std::size_t>(b) * (1 + p) * d;
        for (int t = 0; t < p; ++t)
          for (int c = 0; c < d; ++c)
            f.data()[(static_cast<std::size_t>(b) * d + c) * p + t] = tok[static_cast<std::size_t>(1 + t) * d + c];
      }
      taps.push_back(std::move(f));
      ++next_tap;
    }
  }
  batch_ = n;
  return taps;
}

void VitBackbone::backward(const std::vector<Tensor>& d_taps) {
  if (d_taps.size() != spec_.tap_layers.size()) throw ValidationError("backbone: tap gradient count");
  const int n = batch_, d = spec_.embed_dim, p = grid_ * grid_;
  Tensor dx({n, 1 + p, d});
  std::size_t tap = spec_.tap_layers.size();
  for (int i = deepest_tap(); i >= 0; --i) {
    if (tap > 0 && spec_.tap_layers[tap - 1] == i) {
      --tap;
      const Tensor& g = d_taps[tap];
      for (int b = 0; b < n; ++b) {
        float* tok = dx.data() + static_cast<std::size_t>(b) * (1 + p) * d;
        for (int c = 0; c < d; ++c) {
          const float* plane = g.data() + (static_cast<std::size_t>(b) * d + c) * p;
          for (int t = 0; t < p; ++t) tok[static_cast<std::size_t>(1 + t) * d + c] += plane[t];
        }
      }
    }
    dx = blocks[static_cast<std::size_t>(i)].backward(dx);
  }
  if (pos_embed.needs_grad()) {
    pos_embed.ensure_grad();
    for (int b = 0; b < n; ++b)
      for (std::size_t j = 0; j < pos_embed.grad.numel(); ++j)
        pos_embed.grad[j] += dx[static_cast<std::size_t>(b) * (1 + p) * d + j];
  }
  if (cls_token.needs_grad()) {
    cls_token.ensure_grad();
    for (int b = 0; b < n; ++b)
      for (int c = 0; c < d; ++c) cls_token.grad[static_cast<std::size_t>(c)] += dx[static_cast<std::size_t>(b) * (1 + p) * d + c];
  }
  if (patch_embed.weight.needs_grad() || (patch_embed.has_bias && patch_embed.bias.needs_grad())) {
    Tensor dpe({n, d, grid_, grid_});
    for (int b = 0; b < n; ++b) {
      const float* tok = dx.data() + static_cast<std::size_t>(b) * (1 + p) * d;
      for (int c = 0; c < d; ++c)
        for (int t = 0; t < p; ++t)
          dpe.data()[(static_cast<std::size_t>(b) * d + c) * p + t] = tok[static_cast<std::size_t>(1 + t) * d + c];
    }
    patch_embed.backward(dpe, false);
  }
}

namespace {

// Hugging Face Dinov2Model names -> internal names.
std::string map_hf_name(const std::string& name) {
  static const std::vector<std::pair<std::regex, std::string>> rules = {
      {std::regex(R"(^embeddings\.cls_token$)"), "backbone.cls_token"},
      {std::regex(R"(^embeddings\.position_embeddings$)"), "backbone.pos_embed"},
      {std::regex(R"(^embeddings\.patch_embeddings\.projection\.(weight|bias)$)"), "backbone.patch_embed.$1"},
      {std::regex(R"(^encoder\.layer\.(\d+)\.norm([12])\.(weight|bias)$)"), "backbone.blocks.$1.norm$2.$3"},
      {std::regex(R"(^encoder\.layer\.(\d+)\.attention\.attention\.(query|key|value)\.(weight|bias)$)"), "backbone.blocks.$1.attn.$2.$3"},
      {std::regex(R"(^encoder\.layer\.(\d+)\.attention\.output\.dense\.(weight|bias)$)"), "backbone.blocks.$1.attn.proj.$2"},
      {std::regex(R"(^encoder\.layer\.(\d+)\.layer_scale([12])\.lambda1$)"), "backbone.blocks.$1.ls$2"},
      {std::regex(R"(^encoder\.layer\.(\d+)\.mlp\.(fc[12])\.(weight|bias)$)"), "backbone.blocks.$1.mlp.$2.$3"},
      {std::regex(R"(^layernorm\.(weight|bias)$)"), "backbone.norm.$1"},
  };
  std::string stripped = name;
  if (stripped.starts_with("dinov2.")) stripped = stripped.substr(7);
  for (const auto& [re, fmt] : rules)
    if (std::regex_match(stripped, re)) return std::regex_replace(stripped, re, fmt);
  if (stripped.starts_with("backbone.")) return stripped;
  return "backbone." + stripped;
}

Tensor interpolate_pos_embed(const Tensor& src, int dim, int grid) {
  const int tokens = static_cast<int>(src.numel() / static_cast<std::size_t>(dim));
  const int old_p = tokens - 1;
  const int old_grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(old_p))));
  if (old_grid * old_grid != old_p) throw ValidationError("pos_embed is not a square grid");
  Tensor grid_in({1, dim, old_grid, old_grid});
  for (int t = 0; t < old_p; ++t)
    for (int c = 0; c < dim; ++c)
      grid_in.data()[static_cast<std::size_t>(c) * old_p + t] = src[static_cast<std::size_t>(1 + t) * dim + c];
  const Tensor grid_out = resize_bilinear(grid_in, grid, grid);
  Tensor out({1 + grid * grid, dim});
  for (int c = 0; c < dim; ++c) out[static_cast<std::size_t>(c)] = src[static_cast<std::size_t>(c)];
  for (int t = 0; t < grid * grid; ++t)
    for (int c = 0; c < dim; ++c)
      out[static_cast<std::size_t>(1 + t) * dim + c] = grid_out.data()[static_cast<std::size_t>(c) * grid * grid + t];
  return out;
}

}  // namespace

void VitBackbone::load_weights(const std::filesystem::path& path) {
  auto raw = read_safetensors(path);
  std::map<std::string, Tensor> by_name;
  for (auto& [name, t] : raw) by_name[map_hf_name(name)] = std::move(t);
  ParamRefs params;
  collect(params);
  std::vector<std::string> missing;
  for (Parameter* p : params) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) {
      missing.push_back(p->name);
      continue;
    }
    Tensor& src = it->second;
    if (p == &pos_embed && src.numel() != p->value.numel() &&
        src.numel() % static_cast<std::size_t>(spec_.embed_dim) == 0)
      src = interpolate_pos_embed(src, spec_.embed_dim, grid_);
    if (src.numel() != p->value.numel())
      throw ValidationError("checkpoint tensor " + it->first + " has shape " + src.shape_str() +
                            ", model expects " + p->value.shape_str());
    std::copy(src.vec().begin(), src.vec().end(), p->value.vec().begin());
  }
  if (!missing.empty()) {
    std::string msg = "backbone checkpoint " + path.string() + " lacks " +
                      std::to_string(missing.size()) + " tensors, e.g. " + missing.front();
    throw ValidationError(msg);
  }
}

}  // namespace b2p::nn
