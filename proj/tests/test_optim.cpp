#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "b2p/error.hpp"
#include "b2p/optim.hpp"

using namespace b2p;
using nn::Parameter;
using nn::ParamRole;

namespace {

struct Params {
  std::vector<std::unique_ptr<Parameter>> owned;
  nn::ParamRefs refs;
  Parameter& add(const std::string& name, int n, ParamRole role, bool trainable = true) {
    owned.push_back(std::make_unique<Parameter>(name, std::vector<int>{n}, role));
    owned.back()->trainable = trainable;
    owned.back()->ensure_grad();
    refs.push_back(owned.back().get());
    return *owned.back();
  }
};

}  // namespace

TEST(Cosine, EndpointsExact) {
  for (double base : {5e-4, 1e-3, 0.1}) {
    for (double f : {0.0, 0.01, 0.5}) {
      EXPECT_EQ(cosine_lr(0, 1000, base, f), base);
      EXPECT_EQ(cosine_lr(1000, 1000, base, f), base * f);
      EXPECT_NEAR(cosine_lr(500, 1000, base, f), base * (1 + f) / 2, 1e-18);
    }
  }
  EXPECT_NEAR(cosine_lr(250, 1000, 1.0, 0.0), (1 + std::cos(std::numbers::pi / 4)) / 2, 1e-15);
  EXPECT_THROW(cosine_lr(1001, 1000, 1e-3, 0.01), ConfigError);
  EXPECT_THROW(cosine_lr(0, 0, 1e-3, 0.01), ConfigError);
}

TEST(Clip, AdversarialScalesStayBounded) {
  std::mt19937_64 rng(5);
  std::normal_distribution<float> n(0.0f, 1.0f);
  for (double scale : {1e-8, 1e-3, 1.0, 1e3, 1e8, 1e15, 1e30}) {
    Params p;
    p.add("a", 1000, ParamRole::kWeight);
    p.add("b", 7, ParamRole::kBias);
    for (auto* q : p.refs)
      for (std::size_t i = 0; i < q->grad.numel(); ++i) q->grad[i] = static_cast<float>(n(rng) * scale);
    const double before = global_grad_norm(p.refs);
    const ClipResult r = clip_gradients(p.refs, 1.0);
    EXPECT_NEAR(r.norm, before, before * 1e-12);
    EXPECT_EQ(r.clipped, before > 1.0);
    const double after = global_grad_norm(p.refs);
    EXPECT_LE(after, 1.0 + 1e-6) << scale;
    if (before <= 1.0) EXPECT_DOUBLE_EQ(after, before);
  }
}

TEST(Clip, NonFiniteGradientNamesParameter) {
  Params p;
  p.add("decoder.w", 4, ParamRole::kWeight);
  p.add("head.b", 2, ParamRole::kBias).grad[1] = std::numeric_limits<float>::quiet_NaN();
  try {
    clip_gradients(p.refs, 1.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("head.b"), std::string::npos);
  }
}

// Scalar double oracle of decoupled-decay Adam.
TEST(AdamW, MatchesScalarOracle) {
  Params p;
  Parameter& w = p.add("w", 3, ParamRole::kWeight);
  Parameter& b = p.add("b", 2, ParamRole::kBias);
  Parameter& frozen = p.add("f", 2, ParamRole::kWeight, false);
  std::vector<double> wv{0.5, -1.0, 2.0}, bv{0.1, -0.2};
  for (int i = 0; i < 3; ++i) w.value[i] = static_cast<float>(wv[i]);
  for (int i = 0; i < 2; ++i) b.value[i] = static_cast<float>(bv[i]);
  frozen.value[0] = 3.0f;
  AdamW opt(p.refs);
  std::vector<double> mw(3, 0), vw(3, 0), mb(2, 0), vb(2, 0);
  const double lr = 1e-2, wd = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int t = 1; t <= 20; ++t) {
    auto step = [&](Parameter& q, std::vector<double>& val, std::vector<double>& m, std::vector<double>& v, bool decay) {
      for (std::size_t i = 0; i < val.size(); ++i) {
        const double g = static_cast<float>(n(rng));
        q.grad[i] = static_cast<float>(g);
        if (decay) val[i] *= 1 - lr * wd;
        m[i] = b1 * m[i] + (1 - b1) * g;
        v[i] = b2 * v[i] + (1 - b2) * g * g;
        const double mh = m[i] / (1 - std::pow(b1, t)), vh = v[i] / (1 - std::pow(b2, t));
        val[i] -= lr * mh / (std::sqrt(vh) + eps);
      }
    };
    step(w, wv, mw, vw, true);
    step(b, bv, mb, vb, false);
    opt.step(lr, wd);
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(w.value[i], wv[i], 1e-5);
    for (int i = 0; i < 2; ++i) EXPECT_NEAR(b.value[i], bv[i], 1e-5);
  }
  EXPECT_EQ(frozen.value[0], 3.0f);
  EXPECT_EQ(opt.steps(), 20);
}

TEST(Ema, MatchesScalarRecurrence) {
  Params p;
  Parameter& w = p.add("w", 2, ParamRole::kWeight);
  Parameter& frozen = p.add("f", 1, ParamRole::kWeight, false);
  Parameter& buf = p.add("running_mean", 1, ParamRole::kBuffer, false);
  w.value[0] = 1.0f;
  frozen.value[0] = 7.0f;
  EmaState ema(p.refs, 0.9);
  double s0 = 1.0, s1 = 0.0, sb = 0.0;
  for (int t = 0; t < 50; ++t) {
    const double x0 = std::sin(t), x1 = 0.1 * t, xb = t % 3;
    w.value[0] = static_cast<float>(x0);
    w.value[1] = static_cast<float>(x1);
    buf.value[0] = static_cast<float>(xb);
    ema.update(p.refs);
    s0 = 0.9 * s0 + 0.1 * static_cast<float>(x0);
    s1 = 0.9 * s1 + 0.1 * static_cast<float>(x1);
    sb = 0.9 * sb + 0.1 * static_cast<float>(xb);
    EXPECT_NEAR(ema.shadow()[0][0], s0, 1e-5);
    EXPECT_NEAR(ema.shadow()[0][1], s1, 1e-5);
    EXPECT_NEAR(ema.shadow()[2][0], sb, 1e-5);
    EXPECT_EQ(ema.shadow()[1][0], 7.0f);
  }
  EXPECT_THROW(EmaState(p.refs, 1.0), Error);
  EXPECT_THROW(EmaState(p.refs, -0.1), Error);
}

TEST(Ema, WarmupRampAndSwap) {
  Params p;
  Parameter& w = p.add("w", 1, ParamRole::kWeight);
  EmaState ema(p.refs, 0.999, true);
  EXPECT_DOUBLE_EQ(ema.effective_decay(), 0.1);  // (1+0)/(10+0)
  w.value[0] = 4.0f;
  ema.update(p.refs);
  EXPECT_NEAR(ema.shadow()[0][0], 0.1 * 0 + 0.9 * 4.0, 1e-6);
  EXPECT_DOUBLE_EQ(ema.effective_decay(), 2.0 / 11.0);
  for (int i = 0; i < 100000; ++i) ema.update(p.refs);
  EXPECT_DOUBLE_EQ(ema.effective_decay(), 0.999);
  w.value[0] = -1.0f;
  ema.swap_with(p.refs);
  EXPECT_NEAR(w.value[0], 4.0f, 1e-5);
  EXPECT_EQ(ema.shadow()[0][0], -1.0f);
  ema.swap_with(p.refs);
  EXPECT_EQ(w.value[0], -1.0f);
}
