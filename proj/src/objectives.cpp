#include "b2p/objectives.hpp"

#include <algorithm>
#include <cmath>

namespace b2p {

void LossConfig::validate(int num_classes) const {
  if (!(beta > 0.0 && beta < 1.0)) throw ConfigError("loss.beta must lie in (0,1)");
  if (!(epsilon > 0.0)) throw ConfigError("loss.epsilon must be positive");
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("loss.tau must lie in (0,1)");
  if (!(lambda_bin >= 0.0) || !(lambda_fine >= 0.0))
    throw ConfigError("loss.lambda_bin and loss.lambda_fine must be nonnegative");
  if (warmup_steps && *warmup_steps < 0) throw ConfigError("loss.warmup_steps must be >= 0");
  if (!class_weights.empty()) {
    if (class_weights.size() != static_cast<std::size_t>(num_classes + 1))
      throw ConfigError("loss.class_weights needs " + std::to_string(num_classes + 1) + " entries");
    for (double w : class_weights)
      if (!std::isfinite(w) || w <= 0.0) throw ConfigError("loss.class_weights must be finite and positive");
  }
}

void CorrectionStats::merge(const CorrectionStats& o) {
  pixels_eligible += o.pixels_eligible;
  pixels_corrected += o.pixels_corrected;
  if (corrected_per_class.size() < o.corrected_per_class.size())
    corrected_per_class.resize(o.corrected_per_class.size(), 0);
  for (std::size_t i = 0; i < o.corrected_per_class.size(); ++i)
    corrected_per_class[i] += o.corrected_per_class[i];
}

std::vector<std::uint8_t> self_correct(std::span<const std::uint8_t> pseudo,
                                       std::span<const float> probs, int channels, double tau,
                                       bool warmup_active, CorrectionStats& stats,
                                       double row_tolerance) {
  const std::size_t pixels = pseudo.size();
  if (channels < 2) throw ValidationError("self_correct: need at least one defect class");
  if (probs.size() != pixels * static_cast<std::size_t>(channels))
    throw ValidationError("self_correct: probability/label size mismatch");
  if (stats.corrected_per_class.size() < static_cast<std::size_t>(channels - 1))
    stats.corrected_per_class.resize(static_cast<std::size_t>(channels - 1), 0);
  std::vector<std::uint8_t> out(pseudo.begin(), pseudo.end());
  for (std::size_t i = 0; i < pixels; ++i) {
    if (pseudo[i] >= channels)
      throw ValidationError("self_correct: label " + std::to_string(pseudo[i]) + " out of range");
    double sum = 0;
    for (int c = 0; c < channels; ++c) sum += probs[static_cast<std::size_t>(c) * pixels + i];
    if (std::abs(sum - 1.0) > row_tolerance)
      throw ValidationError("self_correct: probabilities at pixel " + std::to_string(i) +
                            " sum to " + std::to_string(sum));
    if (pseudo[i] != 0) continue;
    ++stats.pixels_eligible;
    if (warmup_active) continue;
    int best = 1;
    float best_p = probs[pixels + i];
    for (int c = 2; c < channels; ++c) {
      const float p = probs[static_cast<std::size_t>(c) * pixels + i];
      if (p > best_p) {
        best_p = p;
        best = c;
      }
    }
    if (static_cast<double>(best_p) > tau) {
      out[i] = static_cast<std::uint8_t>(best);
      ++stats.pixels_corrected;
      ++stats.corrected_per_class[static_cast<std::size_t>(best - 1)];
    }
  }
  return out;
}

std::vector<double> inverse_frequency_weights(std::span<const std::uint64_t> counts) {
  const std::uint64_t most = counts.empty() ? 0 : *std::max_element(counts.begin(), counts.end());
  if (most == 0) return std::vector<double>(counts.size(), 1.0);
  std::vector<double> w(counts.size(), 10.0);
  for (std::size_t c = 0; c < counts.size(); ++c)
    if (counts[c] > 0)
      w[c] = std::clamp(static_cast<double>(most) / static_cast<double>(counts[c]), 0.1, 10.0);
  return w;
}

Tensor softmax_channels(const Tensor& logits) {
  const int n = logits.dim(0), ch = logits.dim(1);
  const std::size_t hw = static_cast<std::size_t>(logits.dim(2)) * logits.dim(3);
  Tensor out(logits.shape());
  for (int b = 0; b < n; ++b) {
    const float* z = logits.data() + static_cast<std::size_t>(b) * ch * hw;
    float* s = out.data() + static_cast<std::size_t>(b) * ch * hw;
    for (std::size_t i = 0; i < hw; ++i) {
      float mx = z[i];
      for (int c = 1; c < ch; ++c) mx = std::max(mx, z[c * hw + i]);
      double se = 0;
      for (int c = 0; c < ch; ++c) se += std::exp(static_cast<double>(z[c * hw + i] - mx));
      for (int c = 0; c < ch; ++c)
        s[c * hw + i] = static_cast<float>(std::exp(static_cast<double>(z[c * hw + i] - mx)) / se);
    }
  }
  return out;
}

LossTerms total_loss(const Tensor& binary_logits, const Tensor& fine_logits,
                     std::span<const std::uint8_t> pseudo, const LossConfig& cfg,
                     std::span<const double> class_weights, bool warmup_active) {
  if (binary_logits.rank() != 4 || binary_logits.dim(1) != 2)
    throw ValidationError("total_loss: binary logits must be (N,2,H,W), got " + binary_logits.shape_str());
  if (fine_logits.rank() != 4 || fine_logits.dim(0) != binary_logits.dim(0) ||
      fine_logits.dim(2) != binary_logits.dim(2) || fine_logits.dim(3) != binary_logits.dim(3))
    throw ValidationError("total_loss: fine logits " + fine_logits.shape_str() +
                          " disagree with binary logits " + binary_logits.shape_str());
  const int n = binary_logits.dim(0), ch = fine_logits.dim(1);
  const std::size_t hw = static_cast<std::size_t>(binary_logits.dim(2)) * binary_logits.dim(3);
  if (pseudo.size() != n * hw) throw ValidationError("total_loss: label count mismatch");

  LossTerms out;
  out.d_binary = Tensor(binary_logits.shape());
  out.d_fine = Tensor(fine_logits.shape());
  out.stats.corrected_per_class.assign(static_cast<std::size_t>(ch - 1), 0);

  // Binary branch: p = sigmoid(z1 - z0), g = [pseudo > 0].
  std::vector<double> p(n * hw);
  std::vector<std::uint8_t> g(n * hw);
  for (int b = 0; b < n; ++b) {
    const float* z = binary_logits.data() + static_cast<std::size_t>(b) * 2 * hw;
    for (std::size_t i = 0; i < hw; ++i) {
      const double d = static_cast<double>(z[hw + i]) - z[i];
      p[b * hw + i] = 1.0 / (1.0 + std::exp(-d));
      g[b * hw + i] = pseudo[b * hw + i] > 0;
    }
  }
  std::vector<double> dp;
  if (cfg.dice_per_image) {
    dp.resize(n * hw);
    std::vector<double> gi;
    for (int b = 0; b < n; ++b) {
      const auto ps = std::span<const double>(p).subspan(b * hw, hw);
      const auto gs = std::span<const std::uint8_t>(g).subspan(b * hw, hw);
      out.bin += asymmetric_dice<double>(ps, gs, cfg.beta, cfg.epsilon, &gi) / n;
      for (std::size_t i = 0; i < hw; ++i) dp[b * hw + i] = gi[i] / n;
    }
  } else {
    out.bin = asymmetric_dice<double>(p, g, cfg.beta, cfg.epsilon, &dp);
  }
  for (int b = 0; b < n; ++b) {
    float* d = out.d_binary.data() + static_cast<std::size_t>(b) * 2 * hw;
    for (std::size_t i = 0; i < hw; ++i) {
      const double pi = p[b * hw + i];
      const double dz = cfg.lambda_bin * dp[b * hw + i] * pi * (1.0 - pi);
      d[hw + i] = static_cast<float>(dz);
      d[i] = static_cast<float>(-dz);
    }
  }

  // Fine branch with self-correction on detached probabilities.
  const bool correct = cfg.self_correction;
  const Tensor probs = correct ? softmax_channels(fine_logits) : Tensor();
  double loss_sum = 0, weight_sum = 0;
  std::vector<double> grad(static_cast<std::size_t>(ch) * hw);
  std::vector<double> z(static_cast<std::size_t>(ch) * hw);
  for (int b = 0; b < n; ++b) {
    const auto labels = pseudo.subspan(b * hw, hw);
    std::vector<std::uint8_t> targets;
    if (correct) {
      const auto pr = std::span<const float>(probs.data() + static_cast<std::size_t>(b) * ch * hw, ch * hw);
      targets = self_correct(labels, pr, ch, cfg.tau, warmup_active, out.stats);
    } else {
      targets.assign(labels.begin(), labels.end());
      for (auto l : labels)
        if (l == 0) ++out.stats.pixels_eligible;
    }
    const float* zf = fine_logits.data() + static_cast<std::size_t>(b) * ch * hw;
    std::copy(zf, zf + ch * hw, z.begin());
    std::fill(grad.begin(), grad.end(), 0.0);
    weighted_cross_entropy_accumulate<double>(z, ch, targets, class_weights, loss_sum, weight_sum,
                                              grad.data());
    float* d = out.d_fine.data() + static_cast<std::size_t>(b) * ch * hw;
    for (std::size_t i = 0; i < grad.size(); ++i) d[i] = static_cast<float>(grad[i]);
  }
  if (weight_sum > 0) {
    out.fine = loss_sum / weight_sum;
    const float scale = static_cast<float>(cfg.lambda_fine / weight_sum);
    for (auto& v : out.d_fine.vec()) v *= scale;
  } else {
    out.d_fine.zero();
  }
  out.total = cfg.lambda_bin * out.bin + cfg.lambda_fine * out.fine;
  return out;
}

}  // namespace b2p
