#include <gtest/gtest.h>

#include "b2p/nn/layers.hpp"
#include "b2p/nn/vit.hpp"
#include "test_util.hpp"

using namespace b2p;
using namespace b2p::nn;
using test::dot;
using test::max_fd_error;
using test::random_tensor;

namespace {

// Runs forward(train) then backward(r) and checks input and parameter
// gradients of L = <r, y> against finite differences.
template <typename Fwd, typename Bwd>
void check_layer(Tensor x, const std::vector<int>& out_shape_hint, Fwd fwd, Bwd bwd,
                 ParamRefs params, double tol = 2e-2) {
  (void)out_shape_hint;
  Tensor y = fwd(x, true);
  const Tensor r = random_tensor(y.shape(), 99);
  for (auto* p : params) {
    p->ensure_grad();
    p->grad.zero();
  }
  const Tensor dx = bwd(r);
  auto loss = [&] { return dot(fwd(x, true), r); };
  if (!dx.empty()) {
    EXPECT_LT(max_fd_error(x, dx, loss), tol) << "input gradient";
  }
  for (auto* p : params) {
    if (!p->needs_grad()) continue;
    const Tensor g = p->grad;
    EXPECT_LT(max_fd_error(p->value, g, loss), tol) << p->name;
  }
}

}  // namespace

TEST(Conv2d, OutputSize) {
  EXPECT_EQ(Conv2d::out_size(128, 3, 2, 1), 64);
  EXPECT_EQ(Conv2d::out_size(518, 3, 2, 1), 259);
  EXPECT_EQ(Conv2d::out_size(259, 3, 2, 1), 130);
}

TEST(Conv2d, MatchesDirectConvolution) {
  Rng rng(1);
  Conv2d conv("c", 3, 4, 3, 2, 1, true, rng);
  init_normal(conv.bias.value, 1.0f, rng);
  const Tensor x = random_tensor({2, 3, 7, 6}, 3);
  const Tensor y = conv.forward(x, false);
  ASSERT_EQ(y.shape(), (std::vector<int>{2, 4, 4, 3}));
  for (int n = 0; n < 2; ++n)
    for (int o = 0; o < 4; ++o)
      for (int oy = 0; oy < 4; ++oy)
        for (int ox = 0; ox < 3; ++ox) {
          double s = conv.bias.value[o];
          for (int c = 0; c < 3; ++c)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const int iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
                if (iy < 0 || iy >= 7 || ix < 0 || ix >= 6) continue;
                s += conv.weight.value[((o * 3 + c) * 3 + ky) * 3 + kx] * x.at(n, c, iy, ix);
              }
          EXPECT_NEAR(y.at(n, o, oy, ox), s, 1e-4);
        }
}

TEST(Conv2d, Gradients) {
  Rng rng(2);
  Conv2d conv("c", 3, 4, 3, 2, 1, true, rng);
  check_layer(random_tensor({2, 3, 7, 6}, 4), {},
              [&](const Tensor& x, bool t) { return conv.forward(x, t); },
              [&](const Tensor& d) { return conv.backward(d); }, {&conv.weight, &conv.bias});
  Conv2d pw("p", 5, 3, 1, 1, 0, true, rng);
  check_layer(random_tensor({2, 5, 4, 4}, 5), {},
              [&](const Tensor& x, bool t) { return pw.forward(x, t); },
              [&](const Tensor& d) { return pw.backward(d); }, {&pw.weight, &pw.bias});
}

TEST(Norm2d, BatchAndGroupGradients) {
  for (NormKind kind : {NormKind::kBatch, NormKind::kGroup}) {
    Norm2d norm("n", 8, kind, 4);
    Rng rng(3);
    init_normal(norm.gamma.value, 1.0f, rng);
    init_normal(norm.beta.value, 1.0f, rng);
    check_layer(random_tensor({3, 8, 3, 4}, 6), {},
                [&](const Tensor& x, bool t) { return norm.forward(x, t); },
                [&](const Tensor& d) { return norm.backward(d); }, {&norm.gamma, &norm.beta}, 3e-2);
  }
}

TEST(Norm2d, BatchRunningStatistics) {
  Norm2d norm("n", 1, NormKind::kBatch);
  Tensor x({2, 1, 1, 2});
  x.vec() = {1, 2, 3, 4};
  norm.forward(x, true);
  // mean 2.5, unbiased variance 5/3
  EXPECT_NEAR(norm.running_mean.value[0], 0.25, 1e-6);
  EXPECT_NEAR(norm.running_var.value[0], 0.9 + 0.1 * (5.0 / 3.0), 1e-6);
  // Eval mode uses the running statistics.
  const Tensor y = norm.forward(x, false);
  EXPECT_NEAR(y[0], (1 - 0.25) / std::sqrt(0.9 + 0.1 * 5.0 / 3.0 + 1e-5), 1e-5);
}

TEST(PixelShuffle, RoundTripAndOrdering) {
  const Tensor x = random_tensor({1, 8, 2, 3}, 7);
  const Tensor y = pixel_shuffle(x, 2);
  ASSERT_EQ(y.shape(), (std::vector<int>{1, 2, 4, 6}));
  // out[c, h*r+i, w*r+j] = in[c*r*r + i*r + j, h, w]
  EXPECT_EQ(y.at(0, 1, 3, 4), x.at(0, 1 * 4 + 1 * 2 + 0, 1, 2));
  const Tensor back = pixel_unshuffle(y, 2);
  EXPECT_EQ(back.vec(), x.vec());
}

TEST(Resize, BilinearHalfPixel) {
  Tensor x({1, 1, 1, 2});
  x.vec() = {0, 1};
  const Tensor y = resize_bilinear(x, 1, 4);
  // PyTorch align_corners=False: [0, 0.25, 0.75, 1]
  EXPECT_NEAR(y[0], 0.0, 1e-6);
  EXPECT_NEAR(y[1], 0.25, 1e-6);
  EXPECT_NEAR(y[2], 0.75, 1e-6);
  EXPECT_NEAR(y[3], 1.0, 1e-6);
  Resize r;
  check_layer(random_tensor({2, 2, 5, 3}, 8), {},
              [&](const Tensor& in, bool t) { return r.forward(in, 7, 9, t); },
              [&](const Tensor& d) { return r.backward(d); }, {});
  // Constant fields are preserved.
  const Tensor c = resize_bilinear(Tensor({1, 1, 3, 3}, 2.5f), 13, 13);
  for (float v : c.vec()) EXPECT_NEAR(v, 2.5, 1e-6);
}

TEST(TokenLayers, Gradients) {
  Rng rng(4);
  Linear lin("l", 6, 5, true, rng, 0.5f);
  check_layer(random_tensor({2, 3, 6}, 9), {},
              [&](const Tensor& x, bool t) { return lin.forward(x, t); },
              [&](const Tensor& d) { return lin.backward(d); }, {&lin.weight, &lin.bias});
  LayerNorm ln("ln", 6);
  init_normal(ln.gamma.value, 1.0f, rng);
  check_layer(random_tensor({2, 3, 6}, 10), {},
              [&](const Tensor& x, bool t) { return ln.forward(x, t); },
              [&](const Tensor& d) { return ln.backward(d); }, {&ln.gamma, &ln.beta}, 3e-2);
  Gelu g;
  check_layer(random_tensor({2, 3, 6}, 11), {},
              [&](const Tensor& x, bool t) { return g.forward(x, t); },
              [&](const Tensor& d) { return g.backward(d); }, {});
  LayerScale ls("s", 6, 0.3f);
  check_layer(random_tensor({2, 3, 6}, 12), {},
              [&](const Tensor& x, bool t) { return ls.forward(x, t); },
              [&](const Tensor& d) { return ls.backward(d); }, {&ls.gamma});
}

TEST(TokenLayers, AttentionGradients) {
  Rng rng(5);
  MultiHeadAttention attn("a", 8, 2, rng);
  for (Linear* l : {&attn.query, &attn.key, &attn.value, &attn.proj}) init_normal(l->weight.value, 0.4f, rng);
  check_layer(random_tensor({2, 5, 8}, 13), {},
              [&](const Tensor& x, bool t) { return attn.forward(x, t); },
              [&](const Tensor& d) { return attn.backward(d); },
              {&attn.query.weight, &attn.key.weight, &attn.value.bias, &attn.proj.weight}, 3e-2);
}

TEST(Vit, BlockGradients) {
  Rng rng(6);
  VitBlock block("b", 8, 2, 2, 0.5f, rng);
  ParamRefs ps;
  block.collect(ps);
  check_layer(random_tensor({1, 5, 8}, 14), {},
              [&](const Tensor& x, bool t) { return block.forward(x, t); },
              [&](const Tensor& d) { return block.backward(d); }, ps, 4e-2);
}

TEST(Vit, StubTapShapes) {
  Rng rng(7);
  VitBackbone bb(BackboneSpec::test_stub(8, 32), 128, rng);
  const auto taps = bb.forward(random_tensor({2, 3, 128, 128}, 15), false);
  ASSERT_EQ(taps.size(), 4u);
  for (const auto& t : taps) EXPECT_EQ(t.shape(), (std::vector<int>{2, 32, 16, 16}));
}

TEST(Vit, SpecValidation) {
  auto spec = BackboneSpec::test_stub();
  spec.tap_layers = {1, 1, 4};
  EXPECT_THROW(spec.validate(), std::exception);
  spec.tap_layers = {1, 2, 8};
  EXPECT_THROW(spec.validate(), std::exception);
}

TEST(Vit, BackboneParameterGradients) {
  Rng rng(8);
  auto spec = BackboneSpec::test_stub(4, 8);
  spec.depth = 4;
  spec.tap_layers = {1, 2};
  VitBackbone bb(spec, 8, rng);
  ParamRefs ps;
  bb.collect(ps);
  for (auto* p : ps) {
    p->trainable = true;
    p->ensure_grad();
    p->grad.zero();
  }
  const Tensor x = random_tensor({2, 3, 8, 8}, 16);
  const auto taps = bb.forward(x, true);
  std::vector<Tensor> rs;
  for (std::size_t i = 0; i < taps.size(); ++i) rs.push_back(random_tensor(taps[i].shape(), 17 + i));
  bb.backward(rs);
  auto loss = [&] {
    const auto t = bb.forward(x, true);
    double s = 0;
    for (std::size_t i = 0; i < t.size(); ++i) s += dot(t[i], rs[i]);
    return s;
  };
  for (auto* p : ps) {
    if (p->name.find("blocks.3") != std::string::npos || p->name.starts_with("backbone.norm")) continue;
    const Tensor g = p->grad;
    EXPECT_LT(max_fd_error(p->value, g, loss, 6), 3e-2) << p->name;
  }
}
