#include <gtest/gtest.h>

#include <random>

#include "b2p/objectives.hpp"
#include "test_util.hpp"

using namespace b2p;

namespace {

// Independent scalar oracle written from the FP/FN form.
double dice_oracle(const std::vector<double>& p, const std::vector<std::uint8_t>& g, double beta,
                   double eps) {
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    tp += p[i] * g[i];
    fp += p[i] * (1 - g[i]);
    fn += (1 - p[i]) * g[i];
  }
  return 1.0 - (tp + eps) / (tp + beta * fp + fn + eps);
}

}  // namespace

TEST(AsymmetricDice, HandExample) {
  const std::vector<double> p{0.5, 0.5};
  const std::vector<std::uint8_t> g{1, 0};
  // 1 - 0.5 / (0.5 + 0.2 + 0.5)
  EXPECT_NEAR(asymmetric_dice<double>(p, g, 0.4, 0.0), 1.0 - 0.5 / 1.2, 1e-15);
  EXPECT_NEAR(asymmetric_dice<double>(p, g, 0.4, 0.0), 0.58333333333333, 1e-12);
}

TEST(AsymmetricDice, PerfectAndEmptyAreExactlyZero) {
  const std::vector<double> p{1, 0, 1, 0};
  const std::vector<std::uint8_t> g{1, 0, 1, 0};
  EXPECT_EQ(asymmetric_dice<double>(p, g, 0.4, 1e-6), 0.0);
  const std::vector<double> z(5, 0.0);
  const std::vector<std::uint8_t> gz(5, 0);
  EXPECT_EQ(asymmetric_dice<double>(z, gz, 0.4, 1e-6), 0.0);
  const std::vector<float> zf(5, 0.0f);
  EXPECT_EQ(asymmetric_dice<float>(zf, gz, 0.4, 1e-6), 0.0f);
}

TEST(AsymmetricDice, Errors) {
  const std::vector<double> p{0.5, 1.5};
  const std::vector<std::uint8_t> g{1, 0};
  EXPECT_THROW(asymmetric_dice<double>(p, g, 0.4, 1e-6), ValidationError);
  const std::vector<std::uint8_t> g3{1, 0, 0};
  EXPECT_THROW(asymmetric_dice<double>(std::vector<double>{0.1, 0.2}, g3, 0.4, 1e-6), ValidationError);
}

TEST(AsymmetricDice, MatchesOracleAndBetaProperties) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> p(20);
    std::vector<std::uint8_t> g(20);
    for (int i = 0; i < 20; ++i) {
      p[i] = u(rng);
      g[i] = u(rng) < 0.3;
    }
    g[0] = 0;  // ensures <p, 1-g> > 0
    EXPECT_NEAR(asymmetric_dice<double>(p, g, 0.4, 1e-6), dice_oracle(p, g, 0.4, 1e-6), 1e-14);
    // Strictly decreasing as beta decreases.
    double prev = asymmetric_dice<double>(p, g, 0.95, 1e-6);
    for (double beta : {0.8, 0.6, 0.4, 0.2, 0.05}) {
      const double cur = asymmetric_dice<double>(p, g, beta, 1e-6);
      EXPECT_LT(cur, prev);
      prev = cur;
    }
    // beta = 1: denominator is sum p + sum g - <p,g> (soft Jaccard).
    double sp = 0, sg = 0, ip = 0;
    for (int i = 0; i < 20; ++i) {
      sp += p[i];
      sg += g[i];
      ip += p[i] * g[i];
    }
    EXPECT_NEAR(asymmetric_dice<double>(p, g, 1.0, 0.0), 1.0 - ip / (sp + sg - ip), 1e-14);
  }
}

TEST(AsymmetricDice, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> p(12);
    std::vector<std::uint8_t> g(12);
    for (int i = 0; i < 12; ++i) {
      p[i] = u(rng);
      g[i] = u(rng) < 0.4;
    }
    std::vector<double> grad;
    asymmetric_dice<double>(p, g, 0.4, 1e-6, &grad);
    for (std::size_t i = 0; i < 12; ++i) {
      const double fd = test::central_diff5(
          p, i, 1e-4, [&](const std::vector<double>& q) { return asymmetric_dice<double>(q, g, 0.4, 1e-6); });
      EXPECT_LT(test::relative_error(fd, grad[i]), 1e-4);
    }
  }
}

TEST(WeightedCrossEntropy, UniformAndConfident) {
  const std::vector<double> w{1, 1, 1};
  const std::vector<double> uniform(3 * 4, 0.7);
  const std::vector<std::uint8_t> t{0, 1, 2, 1};
  EXPECT_NEAR(weighted_cross_entropy<double>(uniform, 3, t, w), std::log(3.0), 1e-12);
  std::vector<double> sharp(3 * 4, -50.0);
  for (int i = 0; i < 4; ++i) sharp[t[i] * 4 + i] = 50.0;
  EXPECT_LT(weighted_cross_entropy<double>(sharp, 3, t, w), 1e-12);
  const std::vector<std::uint8_t> bad{0, 3, 0, 0};
  EXPECT_THROW(weighted_cross_entropy<double>(uniform, 3, bad, w), ValidationError);
}

TEST(WeightedCrossEntropy, TwoPixelScalarOracle) {
  // Layout (C, pixels): pixel 0 logits (1, 2, 0), pixel 1 logits (0.5, -1, 3).
  const std::vector<double> z{1.0, 0.5, 2.0, -1.0, 0.0, 3.0};
  const std::vector<std::uint8_t> t{1, 0};
  const std::vector<double> w{1, 2, 2};
  auto nll = [](double a, double b, double c, double pick) {
    return std::log(std::exp(a) + std::exp(b) + std::exp(c)) - pick;
  };
  const double l0 = nll(1.0, 2.0, 0.0, 2.0);
  const double l1 = nll(0.5, -1.0, 3.0, 0.5);
  EXPECT_NEAR(weighted_cross_entropy<double>(z, 3, t, w), (2 * l0 + 1 * l1) / 3.0, 1e-12);
}

TEST(WeightedCrossEntropy, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd(0, 2);
  const std::vector<double> w{0.3, 2.0, 5.0};
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> z(3 * 6);
    std::vector<std::uint8_t> t(6);
    for (auto& v : z) v = nd(rng);
    for (auto& v : t) v = static_cast<std::uint8_t>(rng() % 3);
    std::vector<double> grad;
    weighted_cross_entropy<double>(z, 3, t, w, &grad);
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double fd = test::central_diff5(
          z, i, 1e-3, [&](const std::vector<double>& q) { return weighted_cross_entropy<double>(q, 3, t, w); });
      EXPECT_LT(test::relative_error(fd, grad[i]), 1e-4);
    }
  }
}

TEST(SelfCorrect, PixelExamples) {
  CorrectionStats st;
  // Three pixels, (C, pixels) layout.
  const std::vector<std::uint8_t> pseudo{0, 2, 0};
  const std::vector<float> probs{0.03f, 0.99f, 0.15f,   // bg
                                 0.95f, 0.005f, 0.85f,  // c1
                                 0.02f, 0.005f, 0.0f};  // c2
  const auto out = self_correct(pseudo, probs, 3, 0.9, false, st);
  EXPECT_EQ(out, (std::vector<std::uint8_t>{1, 2, 0}));
  EXPECT_EQ(st.pixels_eligible, 2u);
  EXPECT_EQ(st.pixels_corrected, 1u);
  EXPECT_EQ(st.corrected_per_class, (std::vector<std::uint64_t>{1, 0}));

  CorrectionStats warm;
  EXPECT_EQ(self_correct(pseudo, probs, 3, 0.9, true, warm), pseudo);
  EXPECT_EQ(warm.pixels_corrected, 0u);
}

TEST(SelfCorrect, ThresholdIsStrictAndRowsAreChecked) {
  CorrectionStats st;
  const std::vector<std::uint8_t> pseudo{0};
  const std::vector<float> at_tau{0.25f, 0.75f};
  EXPECT_EQ(self_correct(pseudo, at_tau, 2, 0.75, false, st)[0], 0);
  const std::vector<float> bad{0.5f, 0.6f};
  EXPECT_THROW(self_correct(pseudo, bad, 2, 0.5, false, st), ValidationError);
}

TEST(SelfCorrect, TiesGoToLowestDefectClass) {
  CorrectionStats st;
  const std::vector<std::uint8_t> pseudo{0};
  const std::vector<float> probs{0.0f, 0.5f, 0.5f};
  EXPECT_EQ(self_correct(pseudo, probs, 3, 0.4, false, st)[0], 1);
}

TEST(ClassWeights, InverseFrequencyClipped) {
  const std::vector<std::uint64_t> counts{900, 90, 10};
  const auto w = inverse_frequency_weights(counts);
  EXPECT_NEAR(w[0], 1.0, 1e-12);
  EXPECT_NEAR(w[1], 10.0, 1e-12);
  EXPECT_NEAR(w[2], 10.0, 1e-12);  // 90 clipped
  const std::vector<std::uint64_t> mid{400, 100, 200};
  const auto wm = inverse_frequency_weights(mid);
  EXPECT_NEAR(wm[1], 4.0, 1e-12);
  EXPECT_NEAR(wm[2], 2.0, 1e-12);
  const std::vector<std::uint64_t> none{100, 0, 0};
  const auto w2 = inverse_frequency_weights(none);
  EXPECT_NEAR(w2[0], 1.0, 1e-12);
  EXPECT_EQ(w2[1], 10.0);
  const std::vector<std::uint64_t> empty{0, 0, 0};
  EXPECT_EQ(inverse_frequency_weights(empty), std::vector<double>(3, 1.0));
}

namespace {

struct Fixture {
  Tensor bin, fine;
  std::vector<std::uint8_t> pseudo;
};

Fixture make_fixture(std::uint64_t seed) {
  Fixture f;
  f.bin = test::random_tensor({2, 2, 4, 5}, seed, 2.0f);
  f.fine = test::random_tensor({2, 3, 4, 5}, seed + 1, 2.0f);
  std::mt19937_64 rng(seed);
  f.pseudo.resize(40);
  for (auto& v : f.pseudo) v = (rng() % 4 == 0) ? static_cast<std::uint8_t>(1 + rng() % 2) : 0;
  return f;
}

}  // namespace

TEST(TotalLoss, ComposesComponents) {
  const Fixture f = make_fixture(11);
  LossConfig cfg;
  cfg.self_correction = false;
  const std::vector<double> w{1, 2, 2};
  const auto terms = total_loss(f.bin, f.fine, f.pseudo, cfg, w, false);

  double dice = 0;
  for (int b = 0; b < 2; ++b) {
    std::vector<double> p(20);
    std::vector<std::uint8_t> g(20);
    for (int i = 0; i < 20; ++i) {
      const double z0 = f.bin[b * 40 + i], z1 = f.bin[b * 40 + 20 + i];
      p[i] = std::exp(z1) / (std::exp(z0) + std::exp(z1));
      g[i] = f.pseudo[b * 20 + i] > 0;
    }
    dice += dice_oracle(p, g, cfg.beta, cfg.epsilon) / 2;
  }
  double num = 0, den = 0;
  for (int b = 0; b < 2; ++b)
    for (int i = 0; i < 20; ++i) {
      double se = 0;
      for (int c = 0; c < 3; ++c) se += std::exp(f.fine[(b * 3 + c) * 20 + i]);
      const int t = f.pseudo[b * 20 + i];
      num += w[t] * (std::log(se) - f.fine[(b * 3 + t) * 20 + i]);
      den += w[t];
    }
  EXPECT_NEAR(terms.bin, dice, 1e-9);
  EXPECT_NEAR(terms.fine, num / den, 1e-6);
  EXPECT_NEAR(terms.total, 0.5 * dice + 0.5 * num / den, 1e-6);

  cfg.lambda_bin = 1;
  cfg.lambda_fine = 0;
  EXPECT_NEAR(total_loss(f.bin, f.fine, f.pseudo, cfg, w, false).total, dice, 1e-9);
}

TEST(TotalLoss, WarmupCorrectsNothing) {
  const Fixture f = make_fixture(12);
  LossConfig cfg;
  cfg.tau = 0.01;
  const std::vector<double> w{1, 1, 1};
  EXPECT_EQ(total_loss(f.bin, f.fine, f.pseudo, cfg, w, true).stats.pixels_corrected, 0u);
  EXPECT_GT(total_loss(f.bin, f.fine, f.pseudo, cfg, w, false).stats.pixels_corrected, 0u);
}

TEST(TotalLoss, LogitGradientsMatchFiniteDifferences) {
  for (bool per_image : {true, false}) {
    Fixture f = make_fixture(13);
    LossConfig cfg;
    cfg.dice_per_image = per_image;
    const std::vector<double> w{0.5, 2, 3};
    const auto terms = total_loss(f.bin, f.fine, f.pseudo, cfg, w, true);
    auto loss = [&] { return total_loss(f.bin, f.fine, f.pseudo, cfg, w, true).total; };
    EXPECT_LT(test::max_fd_error(f.bin, terms.d_binary, loss, 40, 1e-2f), 2e-2);
    EXPECT_LT(test::max_fd_error(f.fine, terms.d_fine, loss, 40, 1e-2f), 2e-2);
  }
}
