// Acceptance suite: one PASS/FAIL line per criterion.
//
//   b2p_acceptance [--only 1,2,...] [--work DIR] [--keep]
//
// Exit status is 0 only when every selected criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "b2p/cli.hpp"
#include "b2p/config.hpp"
#include "b2p/metrics.hpp"
#include "b2p/objectives.hpp"
#include "b2p/optim.hpp"
#include "b2p/student.hpp"
#include "b2p/synth.hpp"
#include "b2p/teacher.hpp"
#include "b2p/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace b2p;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

// Fourth-order central difference along coordinate i.
template <typename F>
double fd5(std::vector<double>& x, std::size_t i, double h, F&& f) {
  const double orig = x[i];
  auto at = [&](double d) {
    x[i] = orig + d;
    const double v = f(x);
    x[i] = orig;
    return v;
  };
  return (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h);
}

// ---------------------------------------------------------------------------
// 1. Loss gradients against finite differences.

Outcome loss_correctness() {
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> u(0.02, 0.98);
  std::normal_distribution<double> nd(0.0, 2.0);
  double worst_dice = 0, worst_wce = 0;
  int tensors = 0;
  for (int t = 0; t < 150; ++t, ++tensors) {
    const std::size_t n = 2 + rng() % 30;
    const double beta = u(rng);
    std::vector<double> p(n);
    std::vector<std::uint8_t> g(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = u(rng);
      g[i] = u(rng) < 0.3;
    }
    std::vector<double> grad;
    asymmetric_dice<double>(p, g, beta, 1e-6, &grad);
    for (std::size_t i = 0; i < n; ++i) {
      const double fd = fd5(p, i, 1e-5, [&](const std::vector<double>& q) { return asymmetric_dice<double>(q, g, beta, 1e-6); });
      worst_dice = std::max(worst_dice, rel_err(fd, grad[i]));
    }
  }
  for (int t = 0; t < 150; ++t, ++tensors) {
    const int channels = 2 + static_cast<int>(rng() % 4);
    const std::size_t pixels = 1 + rng() % 12;
    std::vector<double> z(channels * pixels), w(channels);
    std::vector<std::uint8_t> tg(pixels);
    for (auto& v : z) v = nd(rng);
    for (auto& v : w) v = 0.1 + 5 * u(rng);
    for (auto& v : tg) v = static_cast<std::uint8_t>(rng() % channels);
    std::vector<double> grad;
    weighted_cross_entropy<double>(z, channels, tg, w, &grad);
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double fd = fd5(z, i, 1e-4, [&](const std::vector<double>& q) { return weighted_cross_entropy<double>(q, channels, tg, w); });
      worst_wce = std::max(worst_wce, rel_err(fd, grad[i]));
    }
  }
  // Degenerate Dice cases must be exactly zero.
  bool exact = true;
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 1 + rng() % 40;
    std::vector<std::uint8_t> g(n);
    std::vector<double> p(n);
    std::vector<float> pf(n);
    for (std::size_t i = 0; i < n; ++i) {
      g[i] = rng() % 2;
      p[i] = g[i];
      pf[i] = g[i];
    }
    exact &= asymmetric_dice<double>(p, g, 0.4, 1e-6) == 0.0;
    exact &= asymmetric_dice<float>(pf, g, 0.4, 1e-6) == 0.0f;
    std::fill(g.begin(), g.end(), 0);
    std::fill(p.begin(), p.end(), 0.0);
    std::fill(pf.begin(), pf.end(), 0.0f);
    exact &= asymmetric_dice<double>(p, g, 0.4, 1e-6) == 0.0;
    exact &= asymmetric_dice<float>(pf, g, 0.4, 1e-6) == 0.0f;
  }
  Outcome o;
  o.pass = worst_dice < 1e-4 && worst_wce < 1e-4 && exact && tensors >= 100;
  o.detail = std::to_string(tensors) + " tensors, max rel err dice " + fmt("%.2e", worst_dice) + " wce " +
             fmt("%.2e", worst_wce) + (exact ? ", degenerate dice exactly 0" : ", degenerate dice NOT 0");
  return o;
}

// ---------------------------------------------------------------------------
// 2. Self-correction fuzz.

Outcome self_correction_contract() {
  std::mt19937_64 rng(202);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uint64_t pixels = 0, violations = 0, boundary = 0;
  for (int batch = 0; batch < 150; ++batch) {
    const int K = 1 + static_cast<int>(rng() % 4), C = K + 1;
    const std::size_t n = 800;
    // A float-exact threshold, so rows can sit exactly on it.
    const float tau_f = static_cast<float>(0.3 + 0.65 * u(rng));
    const double tau = tau_f;
    std::vector<std::uint8_t> pseudo(n);
    std::vector<float> probs(C * n);
    for (std::size_t i = 0; i < n; ++i) {
      pseudo[i] = rng() % 3 == 0 ? static_cast<std::uint8_t>(1 + rng() % K) : 0;
      std::vector<double> row(C);
      const int mode = static_cast<int>(rng() % 4);
      if (mode == 0) {
        // Exactly at the threshold for one defect class.
        const int c = 1 + static_cast<int>(rng() % K);
        row[c] = tau_f;
        const double rest = 1.0 - tau_f;
        for (int k = 0; k < C; ++k)
          if (k != c) row[k] = rest / (C - 1);
        ++boundary;
      } else {
        double s = 0;
        for (auto& v : row) s += (v = std::exp(3.0 * (u(rng) - 0.5) * (mode == 1 ? 6 : 1)));
        for (auto& v : row) v /= s;
      }
      for (int k = 0; k < C; ++k) probs[k * n + i] = static_cast<float>(row[k]);
      // Renormalize in float so the row check is satisfied tightly.
      float fs = 0;
      for (int k = 0; k < C; ++k) fs += probs[k * n + i];
      if (mode != 0)
        for (int k = 0; k < C; ++k) probs[k * n + i] /= fs;
    }
    CorrectionStats st, st2, warm;
    const auto out = self_correct(pseudo, probs, C, tau, false, st);
    std::uint64_t eligible = 0, corrected = 0;
    for (std::size_t i = 0; i < n; ++i) {
      int want = pseudo[i];
      if (pseudo[i] == 0) {
        ++eligible;
        int best = 1;
        for (int k = 2; k < C; ++k)
          if (probs[k * n + i] > probs[best * n + i]) best = k;
        if (static_cast<double>(probs[best * n + i]) > tau) {
          want = best;
          ++corrected;
        }
      }
      if (pseudo[i] != 0 && out[i] != pseudo[i]) ++violations;  // one-sided
      if (out[i] != want) ++violations;
    }
    if (st.pixels_eligible != eligible || st.pixels_corrected != corrected) ++violations;
    // Idempotence.
    if (self_correct(out, probs, C, tau, false, st2) != out) ++violations;
    // Warm-up identity.
    if (self_correct(pseudo, probs, C, tau, true, warm) != pseudo || warm.pixels_corrected != 0) ++violations;
    pixels += n;
  }
  Outcome o;
  o.pass = violations == 0 && pixels >= 100000;
  o.detail = std::to_string(pixels) + " pixels (" + std::to_string(boundary) + " on the threshold), " +
             std::to_string(violations) + " violations";
  return o;
}

// ---------------------------------------------------------------------------
// 3. Rasterization against a per-pixel resolver.

Outcome rasterization_oracle() {
  std::mt19937_64 rng(303);
  const OverlapPolicy policies[] = {OverlapPolicy::kHighestClassPriority, OverlapPolicy::kLastWins,
                                    OverlapPolicy::kFirstWins};
  std::uint64_t mismatches = 0, overlapped = 0;
  int scenes = 0;
  for (int s = 0; s < 200; ++s, ++scenes) {
    const int W = 1 + static_cast<int>(rng() % 64), H = 1 + static_cast<int>(rng() % 64);
    const int n = 2 + static_cast<int>(rng() % 6);
    std::vector<TeacherMask> masks;
    for (int i = 0; i < n; ++i) {
      TeacherMask m;
      m.class_id = static_cast<int>(rng() % 4);
      m.source_box_index = i;
      m.mask = MaskGrid(W, H, 0);
      const int x0 = static_cast<int>(rng() % W), y0 = static_cast<int>(rng() % H);
      const int x1 = x0 + 1 + static_cast<int>(rng() % (W - x0)), y1 = y0 + 1 + static_cast<int>(rng() % (H - y0));
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) m.mask(x, y) = rng() % 5 != 0;
      masks.push_back(std::move(m));
    }
    for (auto policy : policies) {
      const LabelGrid got = rasterize(masks, W, H, policy);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          int first = -1, last = -1, high = 0, hits = 0;
          for (const auto& m : masks)
            if (m.mask(x, y)) {
              const int label = m.class_id + 1;
              if (first < 0) first = label;
              last = label;
              high = std::max(high, label);
              ++hits;
            }
          if (policy == OverlapPolicy::kHighestClassPriority && hits > 1) ++overlapped;
          int want = 0;
          if (hits) want = policy == OverlapPolicy::kHighestClassPriority ? high
                           : policy == OverlapPolicy::kLastWins            ? last
                                                                           : first;
          if (got(x, y) != want) ++mismatches;
        }
    }
  }
  Outcome o;
  o.pass = mismatches == 0;
  o.detail = std::to_string(scenes) + " scenes x 3 policies, " + std::to_string(overlapped) + " overlapped pixels, " +
             std::to_string(mismatches) + " mismatches";
  return o;
}

// ---------------------------------------------------------------------------
// 4. Metrics against raw tallies.

Outcome metrics_oracle() {
  std::mt19937_64 rng(404);
  double worst = 0;
  bool presence_ok = true;
  std::vector<ConfusionMatrix> parts;
  const int labels = 3;
  auto check = [&](const Metric& a, std::optional<double> b) {
    if (a.has_value() != b.has_value()) {
      presence_ok = false;
      return;
    }
    if (a) worst = std::max(worst, std::abs(*a - *b));
  };
  for (int t = 0; t < 200; ++t) {
    const int n = 1 + static_cast<int>(rng() % 2000);
    std::vector<std::uint8_t> p(n), g(n);
    for (int i = 0; i < n; ++i) {
      p[i] = rng() % 4 == 0 ? static_cast<std::uint8_t>(rng() % labels) : 0;
      g[i] = rng() % 25 == 0 ? 255 : (rng() % 4 == 0 ? static_cast<std::uint8_t>(rng() % labels) : 0);
    }
    ConfusionMatrix cm(labels);
    accumulate(cm, p, g);
    parts.push_back(cm);
    const MetricReport r = compute_report(cm);

    std::vector<double> inter(labels, 0), uni(labels, 0);
    double tp = 0, fp = 0, fn = 0;
    for (int i = 0; i < n; ++i) {
      if (g[i] == 255) continue;
      for (int c = 0; c < labels; ++c) {
        inter[c] += p[i] == c && g[i] == c;
        uni[c] += p[i] == c || g[i] == c;
      }
      tp += g[i] > 0 && p[i] > 0;
      fp += g[i] == 0 && p[i] > 0;
      fn += g[i] > 0 && p[i] == 0;
    }
    double sum = 0, sum_anom = 0;
    int cnt = 0, cnt_anom = 0;
    for (int c = 0; c < labels; ++c) {
      std::optional<double> iou;
      if (uni[c] > 0) {
        iou = inter[c] / uni[c];
        sum += *iou;
        ++cnt;
        if (c > 0) sum_anom += *iou, ++cnt_anom;
      }
      check(r.per_class_iou[c], iou);
    }
    auto opt = [](bool ok, double v) { return ok ? std::optional<double>(v) : std::nullopt; };
    check(r.miou, opt(cnt > 0, sum / std::max(cnt, 1)));
    check(r.miou_anom, opt(cnt_anom > 0, sum_anom / std::max(cnt_anom, 1)));
    check(r.iou_bin, opt(tp + fp + fn > 0, tp / (tp + fp + fn)));
    check(r.recall_bin, opt(tp + fn > 0, tp / (tp + fn)));
    check(r.precision_bin, opt(tp + fp > 0, tp / (tp + fp)));
    check(r.f1_anom, opt(tp + fp + fn > 0, 2 * tp / (2 * tp + fp + fn)));
  }
  ConfusionMatrix seq(labels);
  for (const auto& c : parts) seq += c;
  bool order_ok = true;
  for (int threads : {1, 2, 3, 4, 8}) order_ok &= reduce_parallel(parts, threads) == seq;
  for (int k = 0; k < 5; ++k) {
    auto shuffled = parts;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    order_ok &= reduce_parallel(shuffled, 1 + k) == seq;
  }
  Outcome o;
  o.pass = worst <= 1e-12 && presence_ok && order_ok;
  o.detail = "200 pairs, max abs err " + fmt("%.1e", worst) + (presence_ok ? "" : ", undefined-metric mismatch") +
             (order_ok ? ", reduction order invariant" : ", reduction order DEPENDS");
  return o;
}

// ---------------------------------------------------------------------------
// 5. Shapes and frozen backbone.

Tensor random_images(int n, int size, std::uint64_t seed) {
  Tensor t({n, 3, size, size});
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.0f, 1.0f);
  for (auto& v : t.vec()) v = d(rng);
  return t;
}

Outcome architecture() {
  std::string detail;
  bool ok = true;
  for (int size : {128, 518}) {
    ModelConfig c = ModelConfig::desk_scale(size);
    if (size == 518) c.backbone = nn::BackboneSpec::test_stub(14, 32);
    Student s(c);
    const auto out = s.forward(random_images(1, size, size), false);
    const bool shapes = out.binary_logits.shape() == std::vector<int>{1, 2, size, size} &&
                        out.fine_logits.shape() == std::vector<int>{1, c.num_classes + 1, size, size};
    ok &= shapes;
    detail += std::to_string(size) + ":" + out.binary_logits.shape_str() + "/" + out.fine_logits.shape_str() + " ";
  }

  Student s(ModelConfig::desk_scale(128));
  const auto before = s.state_values();
  const nn::ParamRefs params = s.trainable_parameters();
  bool no_weight_matrices = s.parameter_report().backbone_weight_matrices_trainable == 0;
  for (const auto* p : params) no_weight_matrices &= !(p->in_backbone && p->role == nn::ParamRole::kWeight);
  AdamW opt(params);
  std::mt19937_64 rng(505);
  const std::vector<double> weights{1.0, 3.0, 3.0};
  LossConfig lc;
  for (int step = 0; step < 10; ++step) {
    const Tensor x = random_images(2, 128, 600 + step);
    std::vector<std::uint8_t> labels(2 * 128 * 128, 0);
    for (int i = 0; i < 2; ++i) {
      const int y0 = static_cast<int>(rng() % 100), x0 = static_cast<int>(rng() % 100);
      for (int y = y0; y < y0 + 20; ++y)
        for (int xx = x0; xx < x0 + 20; ++xx) labels[static_cast<std::size_t>(i) * 128 * 128 + y * 128 + xx] = 1 + (step + i) % 2;
    }
    const auto out = s.forward(x, true);
    const LossTerms terms = total_loss(out.binary_logits, out.fine_logits, labels, lc, weights, false);
    s.zero_grad();
    s.backward(terms.d_binary, terms.d_fine);
    clip_gradients(params, 1.0);
    opt.step(1e-3, 1e-2);
  }
  int weights_checked = 0, weights_changed = 0, biases_changed = 0;
  for (const auto* p : s.state()) {
    if (!p->in_backbone) continue;
    const bool same = p->value.vec() == before.at(p->name).vec();
    if (p->role == nn::ParamRole::kWeight) {
      ++weights_checked;
      weights_changed += !same;
    }
    if (p->role == nn::ParamRole::kBias) biases_changed += !same;
  }
  ok &= no_weight_matrices && weights_changed == 0 && biases_changed >= 1;
  detail += "| 10 steps: " + std::to_string(weights_checked) + " backbone weight matrices, " +
            std::to_string(weights_changed) + " changed, " + std::to_string(biases_changed) + " biases moved";

  // Pretrained layout: the ratio only depends on tensor shapes.
  ModelConfig full;
  full.backbone = nn::BackboneSpec::pretrained_vit_s14();
  const double ratio = Student(full).parameter_report().trainable_ratio();
  ok &= ratio < 0.35;
  detail += " | ViT-S/14 layout trainable/total " + fmt("%.3f", ratio);
  return {ok, detail};
}

// ---------------------------------------------------------------------------
// 6. Trainer mechanics.

TrainingConfig small_config() {
  TrainingConfig c = bench_config();
  c.synth.scene.image_size = 32;
  c.synth.scene.defect_image_fraction = 1.0;
  c.synth.train_images = 8;
  c.synth.val_images = 2;
  c.synth.test_images = 2;
  c.model = ModelConfig::desk_scale(32);
  c.epochs = 2;
  c.batch_size = 4;
  return c;
}

DatasetManifest manifest_of(const SyntheticDataset& ds) { return load_manifest(ds.manifest_path).manifest; }

std::vector<std::string> step_lines(const fs::path& log) {
  std::vector<std::string> out;
  std::ifstream in(log);
  for (std::string line; std::getline(in, line);)
    if (json::parse(line).value("type", "") == "step") out.push_back(line);
  return out;
}

Outcome trainer_mechanics(const fs::path& work) {
  bool ok = true;
  std::string detail;

  // Clipping on losses scaled far beyond float comfort.
  Student s(ModelConfig::desk_scale(32));
  const nn::ParamRefs params = s.trainable_parameters();
  const Tensor x = random_images(2, 32, 61);
  std::vector<std::uint8_t> labels(2 * 32 * 32, 0);
  for (int i = 100; i < 400; ++i) labels[i] = 1 + i % 2;
  double worst_after = 0;
  for (double scale : {1e-6, 1e-2, 1.0, 1e3, 1e6, 1e9, 1e12}) {
    const auto out = s.forward(x, true);
    LossTerms t = total_loss(out.binary_logits, out.fine_logits, labels, LossConfig{}, std::vector<double>{1, 5, 5}, false);
    for (auto& v : t.d_binary.vec()) v = static_cast<float>(v * scale);
    for (auto& v : t.d_fine.vec()) v = static_cast<float>(v * scale);
    s.zero_grad();
    s.backward(t.d_binary, t.d_fine);
    clip_gradients(params, 1.0);
    worst_after = std::max(worst_after, global_grad_norm(params));
  }
  ok &= worst_after <= 1.0 + 1e-6;
  detail += "max post-clip norm " + fmt("%.9f", worst_after);

  bool cosine_ok = true;
  for (double base : {1e-4, 5e-4, 2e-3})
    for (double f : {0.0, 0.01, 0.1})
      for (long total : {1L, 7L, 1000L})
        cosine_ok &= cosine_lr(0, total, base, f) == base && cosine_lr(total, total, base, f) == base * f;
  ok &= cosine_ok;
  detail += cosine_ok ? ", cosine endpoints exact" : ", cosine endpoints WRONG";

  // EMA against a scalar double recurrence.
  nn::Parameter w("w", {3}, nn::ParamRole::kWeight);
  w.ensure_grad();
  nn::ParamRefs refs{&w};
  EmaState ema(refs, 0.99);
  std::vector<double> shadow(3, 0.0);
  double ema_err = 0;
  std::mt19937_64 rng(66);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  for (int t = 0; t < 500; ++t) {
    for (int i = 0; i < 3; ++i) w.value[i] = nd(rng);
    ema.update(refs);
    for (int i = 0; i < 3; ++i) {
      shadow[i] = 0.99 * shadow[i] + 0.01 * w.value[i];
      ema_err = std::max(ema_err, std::abs(shadow[i] - ema.shadow()[0][i]));
    }
  }
  ok &= ema_err < 1e-5;
  detail += ", EMA max err " + fmt("%.1e", ema_err);

  // Bit-for-bit reruns.
  const SyntheticDataset ds = emit_dataset(small_config(), work / "data");
  const DatasetManifest m = manifest_of(ds);
  const FitResult a = fit(ds.config, m, work / "a");
  const FitResult b = fit(ds.config, m, work / "b");
  bool same = a.steps.size() == b.steps.size() && !a.steps.empty();
  for (std::size_t i = 0; same && i < a.steps.size(); ++i)
    same = a.steps[i].loss_total == b.steps[i].loss_total && a.steps[i].loss_bin == b.steps[i].loss_bin &&
           a.steps[i].loss_fine == b.steps[i].loss_fine && a.steps[i].grad_norm == b.steps[i].grad_norm;
  const auto la = step_lines(work / "a" / "train_log.jsonl"), lb = step_lines(work / "b" / "train_log.jsonl");
  same &= la == lb && !la.empty();
  // And from the snapshot alone.
  const FitResult c = fit(load_config(work / "a" / "config.json"), m, work / "c");
  same &= step_lines(work / "c" / "train_log.jsonl") == la;
  ok &= same;
  detail += ", " + std::to_string(la.size()) + " logged steps " + (same ? "bit-identical over 3 runs" : "DIFFER");
  return {ok, detail};
}

// ---------------------------------------------------------------------------
// 7. Overfit one image.

Outcome overfit_one(const fs::path& work) {
  TrainingConfig cfg = bench_config();
  cfg.synth.scene.defect_image_fraction = 1.0;
  cfg.synth.train_images = 1;
  cfg.synth.val_images = 1;
  cfg.synth.test_images = 1;
  cfg.synth.scene.seed = 7;
  cfg.teacher.noise = NoiseProfile::none();
  cfg.batch_size = 1;
  cfg.augment_hflip = false;
  cfg.loss.self_correction = false;  // the target is the pseudo-label map itself
  cfg.schedule.min_lr_factor = 0.1;
  cfg.epochs = 400;
  const SyntheticDataset ds = emit_dataset(cfg, work / "data");
  const DatasetManifest m = manifest_of(ds);
  const FitResult r = fit(ds.config, m, work / "run");
  const auto model = student_from_checkpoint(load_checkpoint(r.last_checkpoint), false);

  const ImageRecord& rec = *m.records_in(Split::kTrain).front();
  const PseudoLabelCache cache(ds.config.data.cache_root, teacher_fingerprint(ds.config.teacher));
  const LabelGrid target = *cache.load(rec.image_id);
  const Prediction p = predict(*model, read_image(m.resolve(rec.image_path)));
  std::size_t agree = 0, fg = 0, fg_hit = 0;
  for (std::size_t i = 0; i < target.values.size(); ++i) {
    agree += p.classes.values[i] == target.values[i];
    if (target.values[i]) {
      ++fg;
      fg_hit += p.classes.values[i] == target.values[i];
    }
  }
  const double agreement = static_cast<double>(agree) / target.values.size();
  Outcome o;
  o.pass = agreement >= 0.99;
  o.detail = "pixel agreement " + fmt("%.4f", agreement) + " after " + std::to_string(r.steps.size()) +
             " steps; defect pixels " + std::to_string(fg_hit) + "/" + std::to_string(fg) + " recovered";
  return o;
}

// ---------------------------------------------------------------------------
// 8. Self-correction ablation on the synthetic bench.

TrainingConfig ablation_config() {
  TrainingConfig c = bench_config();
  c.teacher.noise = NoiseProfile{};  // drop 0.3, erode 1, fp 0.5, omission 0.15
  return c;
}

Outcome ablation(const fs::path& work) {
  const TrainingConfig fn_cfg = ablation_config();
  const BenchReport fn = run_bench(fn_cfg, 3, work / "fn_heavy");
  std::ofstream(work / "fn_heavy" / "report.json") << fn.to_json();
  TrainingConfig clean_cfg = fn_cfg;
  clean_cfg.teacher.noise = NoiseProfile::none();
  const BenchReport clean = run_bench(clean_cfg, 3, work / "zero_noise");
  std::ofstream(work / "zero_noise" / "report.json") << clean.to_json();

  std::cout << "  fn-heavy profile\n" << fn.to_table() << "  zero-noise profile\n" << clean.to_table();
  const double dr = fn.mean_recall_delta().value_or(-1.0);
  const double dm = fn.mean_miou_anom_delta().value_or(-1.0);
  const double zr = clean.mean_recall_delta().value_or(1.0);
  double zfrac = 0;
  for (const auto& row : clean.rows) zfrac = std::max(zfrac, row.corrected_fraction_on());
  Outcome o;
  o.pass = dr >= 0.05 && dm >= 0.0 && std::abs(zr) < 0.03 && zfrac < 0.02;
  o.detail = "fn-heavy mean dRecall_bin " + fmt("%+.4f", dr) + " (>= +0.05), dmIoU_anom " + fmt("%+.4f", dm) +
             " (>= 0); zero-noise |dRecall_bin| " + fmt("%.4f", std::abs(zr)) + " (< 0.03), max corrected fraction " +
             fmt("%.4f", zfrac) + " (< 0.02)";
  return o;
}

// ---------------------------------------------------------------------------
// 9. synth-bench dataset through the command-line pipeline.

struct CliRun {
  int code;
  std::string out, err;
};

CliRun cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

Outcome pipeline(const fs::path& work) {
  TrainingConfig c = small_config();
  c.synth.scene.image_size = 64;
  c.model = ModelConfig::desk_scale(64);
  c.synth.train_images = 24;
  c.synth.val_images = 6;
  c.synth.test_images = 6;
  c.epochs = 8;
  std::ofstream(work / "bench.json") << config_to_json(c);
  const fs::path bench = work / "bench";
  auto r = cli({"synth-bench", "--config", (work / "bench.json").string(), "--seeds", "1", "--output", bench.string()});
  if (r.code != kExitOk) return {false, "synth-bench exited " + std::to_string(r.code) + ": " + r.err};

  // The emitted dataset, untouched, through the four commands.
  const fs::path data = bench / ("seed_" + std::to_string(c.seed)) / "data";
  const std::string cfg = (data / "config.json").string();
  const fs::path cache = work / "cache", run = work / "run";
  const std::string cache_override = "data.cache_root=" + cache.string();
  r = cli({"pseudo-label", "--config", cfg, "--output", cache.string()});
  if (r.code != kExitOk) return {false, "pseudo-label exited " + std::to_string(r.code) + ": " + r.err};
  r = cli({"train", "--config", cfg, "--override", cache_override, "--output", run.string()});
  if (r.code != kExitOk) return {false, "train exited " + std::to_string(r.code) + ": " + r.err};
  const fs::path ckpt = run / "ckpt_best.safetensors";
  for (const char* split : {"val", "test"}) {
    r = cli({"predict", "--checkpoint", ckpt.string(), "--split", split, "--output", (work / "pred" / split).string()});
    if (r.code != kExitOk) return {false, std::string("predict ") + split + " exited " + std::to_string(r.code) + ": " + r.err};
  }
  const TrainingConfig dcfg = load_config(data / "config.json");
  const fs::path pseudo_dir = cache / teacher_fingerprint(dcfg.teacher);
  r = cli({"eval", "--config", cfg, "--split", "val", "--predictions", (work / "pred" / "val").string(),
           "--ground-truth", pseudo_dir.string()});
  if (r.code != kExitOk) return {false, "eval val exited " + std::to_string(r.code) + ": " + r.err};
  r = cli({"eval", "--config", cfg, "--split", "test", "--predictions", (work / "pred" / "test").string(),
           "--ground-truth", (data / "gt").string()});
  if (r.code != kExitOk) return {false, "eval test exited " + std::to_string(r.code) + ": " + r.err};

  // Trainer's own numbers: the selected epoch's validation metric (stored
  // in the checkpoint) and an in-process evaluation of the test split.
  const Checkpoint ck = load_checkpoint(ckpt);
  const json val = json::parse(std::ifstream(work / "pred" / "val" / "report.json"));
  const json test = json::parse(std::ifstream(work / "pred" / "test" / "report.json"));
  const auto model = student_from_checkpoint(ck, true);
  const DatasetManifest m = load_manifest(data / "manifest.json").manifest;
  const LabelSource gt = [&](const ImageRecord& rec) { return read_label_png(data / "gt" / (rec.image_id + ".png")); };
  const MetricReport internal = evaluate_model(*model, m, Split::kTest, gt).report;

  double worst = 0;
  bool presence = true;
  auto compare = [&](const json& j, const Metric& v) {
    if (j.is_null() != !v.has_value()) {
      presence = false;
      return;
    }
    if (v) worst = std::max(worst, std::abs(j.get<double>() - *v));
  };
  compare(val["report"][ck.meta.metric_name], ck.meta.metric);
  for (const char* k : {"miou", "miou_anom", "f1_anom", "iou_bin", "recall_bin", "precision_bin"})
    compare(test["report"][k], internal.get(k));
  Outcome o;
  o.pass = presence && worst <= 1e-9;
  o.detail = "synth-bench -> pseudo-label -> train -> predict -> eval ok; max |external - internal| " +
             fmt("%.1e", worst) + (presence ? "" : ", metric presence differs") + " (val " + ck.meta.metric_name +
             " " + fmt("%.4f", ck.meta.metric.value_or(NAN)) + ", test mIoU " + fmt("%.4f", internal.miou.value_or(NAN)) + ")";
  return o;
}

struct Criterion {
  int id;
  std::string name;
  double budget_seconds;
  std::function<Outcome(const fs::path&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"b2p acceptance suite"};
  std::vector<int> only;
  std::string work_arg;
  bool keep = false;
  app.add_option("--only", only, "criteria to run (default all)")->delimiter(',');
  app.add_option("--work", work_arg, "scratch directory (default a fresh temp dir)");
  app.add_flag("--keep", keep, "keep the scratch directory");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria{
      {1, "loss correctness", 60, [](const fs::path&) { return loss_correctness(); }},
      {2, "self-correction contract", 60, [](const fs::path&) { return self_correction_contract(); }},
      {3, "rasterization oracle", 60, [](const fs::path&) { return rasterization_oracle(); }},
      {4, "metrics oracle", 60, [](const fs::path&) { return metrics_oracle(); }},
      {5, "architecture shape/freeze", 300, [](const fs::path&) { return architecture(); }},
      {6, "trainer mechanics", 300, trainer_mechanics},
      {7, "overfit one sample", 600, overfit_one},
      {8, "self-correction ablation", 45 * 60, ablation},
      {9, "pipeline integrity", 600, pipeline},
  };

  fs::path work = work_arg.empty() ? fs::temp_directory_path() / ("b2p-acceptance-" + std::to_string(std::random_device{}()))
                                   : fs::path(work_arg);
  fs::create_directories(work);
  int failed = 0, ran = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const fs::path dir = work / ("criterion_" + std::to_string(c.id));
    fs::create_directories(dir);
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run(dir);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs > c.budget_seconds) {
      o.pass = false;
      o.detail += "; over the " + fmt("%.0f", c.budget_seconds) + " s budget";
    }
    ++ran;
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << " (" << fmt("%.1f", secs)
              << " s): " << o.detail << std::endl;
  }
  std::cout << (ran - failed) << "/" << ran << " criteria passed" << std::endl;
  if (!keep && work_arg.empty()) {
    std::error_code ec;
    fs::remove_all(work, ec);
  }
  return failed ? 1 : 0;
}
