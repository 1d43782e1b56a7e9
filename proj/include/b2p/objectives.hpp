#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "b2p/error.hpp"
#include "b2p/tensor.hpp"

namespace b2p {

struct LossConfig {
  double beta = 0.4;
  double epsilon = 1e-6;
  double tau = 0.9;
  std::vector<double> class_weights;  // K+1 entries; empty means inverse frequency
  double lambda_bin = 0.5;
  double lambda_fine = 0.5;
  std::optional<long> warmup_steps;   // unset: one epoch of steps
  bool self_correction = true;
  bool dice_per_image = true;         // false pools the whole batch into one Dice term

  void validate(int num_classes) const;  // throws ConfigError
};

struct CorrectionStats {
  std::uint64_t pixels_eligible = 0;   // pseudo label 0
  std::uint64_t pixels_corrected = 0;
  std::vector<std::uint64_t> corrected_per_class;  // length K, index c-1

  void merge(const CorrectionStats& o);
};

// Asymmetric Dice on one set of foreground probabilities p and binary
// targets g:
//   L = 1 - (I + eps) / (I + beta * FP + FN + eps)
// with I = <p,g>, FP = <p,1-g>, FN = <1-p,g>. When grad is non-null it
// receives dL/dp (resized to p.size()).
template <typename Real>
Real asymmetric_dice(std::span<const Real> p, std::span<const std::uint8_t> g, double beta,
                     double epsilon, std::vector<Real>* grad = nullptr) {
  if (p.size() != g.size())
    throw ValidationError("asymmetric_dice: " + std::to_string(p.size()) + " probabilities vs " +
                          std::to_string(g.size()) + " targets");
  Real inter = 0, psum = 0, gsum = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] >= Real(0) && p[i] <= Real(1)))
      throw ValidationError("asymmetric_dice: probability outside [0,1] at index " + std::to_string(i));
    if (g[i] > 1) throw ValidationError("asymmetric_dice: target must be 0 or 1");
    psum += p[i];
    if (g[i]) {
      inter += p[i];
      gsum += Real(1);
    }
  }
  const Real b = static_cast<Real>(beta), eps = static_cast<Real>(epsilon);
  // I + beta*(P - I) + (G - I) + eps
  const Real den = inter + b * (psum - inter) + (gsum - inter) + eps;
  const Real num = inter + eps;
  if (grad) {
    grad->resize(p.size());
    const Real d2 = den * den;
    for (std::size_t i = 0; i < p.size(); ++i) {
      // d num/dp = g, d den/dp = beta * (1 - g)
      const Real gi = g[i] ? Real(1) : Real(0);
      (*grad)[i] = -(gi * den - num * b * (Real(1) - gi)) / d2;
    }
  }
  return Real(1) - num / den;
}

// Class-weighted cross-entropy over `pixels` positions of a (C, pixels)
// logit block: sum_t w_t * -log softmax(z)_t / sum_t w_t. Accumulates the
// unnormalized weighted loss and weight sum so callers can combine blocks;
// when grad is non-null, grad[c*pixels + i] receives w_t * (s_c - [c == t])
// (still to be divided by the total weight).
template <typename Real>
void weighted_cross_entropy_accumulate(std::span<const Real> logits, int channels,
                                       std::span<const std::uint8_t> targets,
                                       std::span<const double> weights, Real& loss_sum,
                                       Real& weight_sum, Real* grad = nullptr) {
  const std::size_t pixels = targets.size();
  if (logits.size() != pixels * static_cast<std::size_t>(channels))
    throw ValidationError("weighted_cross_entropy: logits/targets size mismatch");
  if (weights.size() != static_cast<std::size_t>(channels))
    throw ValidationError("weighted_cross_entropy: expected " + std::to_string(channels) +
                          " class weights");
  std::vector<Real> z(static_cast<std::size_t>(channels));
  for (std::size_t i = 0; i < pixels; ++i) {
    const int t = targets[i];
    if (t >= channels)
      throw ValidationError("weighted_cross_entropy: target " + std::to_string(t) + " out of range");
    Real mx = logits[i];
    for (int c = 0; c < channels; ++c) {
      z[c] = logits[static_cast<std::size_t>(c) * pixels + i];
      mx = std::max(mx, z[c]);
    }
    Real se = 0;
    for (int c = 0; c < channels; ++c) se += std::exp(z[c] - mx);
    const Real lse = mx + std::log(se);
    const Real w = static_cast<Real>(weights[static_cast<std::size_t>(t)]);
    loss_sum += w * (lse - z[t]);
    weight_sum += w;
    if (grad)
      for (int c = 0; c < channels; ++c) {
        const Real s = std::exp(z[c] - lse);
        grad[static_cast<std::size_t>(c) * pixels + i] += w * (s - (c == t ? Real(1) : Real(0)));
      }
  }
}

template <typename Real>
Real weighted_cross_entropy(std::span<const Real> logits, int channels,
                            std::span<const std::uint8_t> targets, std::span<const double> weights,
                            std::vector<Real>* grad = nullptr) {
  Real loss = 0, wsum = 0;
  if (grad) grad->assign(logits.size(), Real(0));
  weighted_cross_entropy_accumulate(logits, channels, targets, weights, loss, wsum,
                                    grad ? grad->data() : nullptr);
  if (wsum <= Real(0)) return Real(0);
  if (grad)
    for (auto& v : *grad) v /= wsum;
  return loss / wsum;
}

// One-sided correction: a pixel with pseudo label 0 takes the most likely
// defect class when that class's probability exceeds tau strictly. probs is
// a (K+1, pixels) block of softmax outputs. Labels other than 0 are never
// touched. During warm-up the input is returned unchanged.
std::vector<std::uint8_t> self_correct(std::span<const std::uint8_t> pseudo,
                                       std::span<const float> probs, int channels, double tau,
                                       bool warmup_active, CorrectionStats& stats,
                                       double row_tolerance = 1e-4);

// Inverse-frequency weights max_count / count_c clipped to [0.1, 10], so the
// most frequent class gets 1. Classes with no pixels get the upper clip.
std::vector<double> inverse_frequency_weights(std::span<const std::uint64_t> counts);

struct LossTerms {
  double total = 0;
  double bin = 0;
  double fine = 0;
  CorrectionStats stats;
  Tensor d_binary;  // dL/d binary_logits
  Tensor d_fine;    // dL/d fine_logits
};

// lambda_bin * Dice(softmax(binary)[1], pseudo > 0) +
// lambda_fine * WCE(fine, self_correct(pseudo)).
// pseudo holds N*H*W labels in image-major order.
LossTerms total_loss(const Tensor& binary_logits, const Tensor& fine_logits,
                     std::span<const std::uint8_t> pseudo, const LossConfig& cfg,
                     std::span<const double> class_weights, bool warmup_active);

// Per-pixel softmax over channels of an (N,C,H,W) tensor.
Tensor softmax_channels(const Tensor& logits);

}  // namespace b2p
