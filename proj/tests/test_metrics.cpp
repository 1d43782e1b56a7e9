#include <gtest/gtest.h>

#include <random>

#include "b2p/error.hpp"
#include "b2p/metrics.hpp"
#include "test_util.hpp"

using namespace b2p;
using b2p::test::TempDir;

namespace {

ConfusionMatrix from_rows(const std::vector<std::vector<std::uint64_t>>& rows) {
  ConfusionMatrix cm(static_cast<int>(rows.size()));
  for (std::size_t g = 0; g < rows.size(); ++g)
    for (std::size_t p = 0; p < rows.size(); ++p) cm.at(static_cast<int>(g), static_cast<int>(p)) = rows[g][p];
  return cm;
}

// Metrics straight from the pixel lists, without a confusion matrix.
struct BruteForce {
  std::vector<Metric> iou;
  Metric miou, miou_anom, iou_bin, recall_bin, precision_bin, f1;
};

BruteForce brute_force(const std::vector<int>& pred, const std::vector<int>& gt, int labels) {
  BruteForce b;
  double sum = 0, sum_anom = 0;
  int n = 0, n_anom = 0;
  for (int c = 0; c < labels; ++c) {
    long inter = 0, uni = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] == 255) continue;
      inter += (pred[i] == c && gt[i] == c);
      uni += (pred[i] == c || gt[i] == c);
    }
    if (uni == 0) {
      b.iou.push_back(std::nullopt);
      continue;
    }
    const double v = static_cast<double>(inter) / static_cast<double>(uni);
    b.iou.push_back(v);
    sum += v;
    ++n;
    if (c > 0) {
      sum_anom += v;
      ++n_anom;
    }
  }
  if (n) b.miou = sum / n;
  if (n_anom) b.miou_anom = sum_anom / n_anom;
  long tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == 255) continue;
    const bool g = gt[i] > 0, p = pred[i] > 0;
    tp += g && p;
    fp += !g && p;
    fn += g && !p;
  }
  if (tp + fp + fn) b.iou_bin = double(tp) / double(tp + fp + fn);
  if (tp + fn) b.recall_bin = double(tp) / double(tp + fn);
  if (tp + fp) b.precision_bin = double(tp) / double(tp + fp);
  if (tp + fp + fn) b.f1 = 2.0 * tp / double(2 * tp + fp + fn);
  return b;
}

void expect_metric(const Metric& a, const Metric& b, const char* what) {
  ASSERT_EQ(a.has_value(), b.has_value()) << what;
  if (a) EXPECT_NEAR(*a, *b, 1e-12) << what;
}

}  // namespace

TEST(Accumulate, Examples) {
  ConfusionMatrix cm(3);
  const std::vector<std::uint8_t> ones(4, 1);
  accumulate(cm, ones, ones);
  EXPECT_EQ(cm.at(1, 1), 4u);
  EXPECT_EQ(cm.total(), 4u);
  ConfusionMatrix d(3);
  const std::vector<std::uint8_t> p{0, 1, 2, 0}, g{1, 2, 0, 2};
  accumulate(d, p, g);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(d.at(i, i), 0u);
  EXPECT_EQ(d.total(), 4u);
}

TEST(Accumulate, IgnoreAndRangeErrors) {
  ConfusionMatrix cm(3);
  const std::vector<std::uint8_t> p{0, 1, 2}, g{255, 1, 2};
  accumulate(cm, p, g);
  EXPECT_EQ(cm.total(), 2u);
  const std::vector<std::uint8_t> bad{0, 3, 1};
  EXPECT_THROW(accumulate(cm, bad, p), Error);
  EXPECT_THROW(accumulate(cm, p, bad), Error);
  const std::vector<std::uint8_t> shorter{0, 1};
  EXPECT_THROW(accumulate(cm, shorter, p), Error);
}

TEST(Accumulate, MatchesBruteForceTally) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 50; ++t) {
    std::vector<std::uint8_t> p(64), g(64);
    for (auto& v : p) v = rng() % 3;
    for (auto& v : g) v = rng() % 3;
    ConfusionMatrix cm(3);
    accumulate(cm, p, g);
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) {
        std::uint64_t n = 0;
        for (int i = 0; i < 64; ++i) n += (g[i] == a && p[i] == b);
        EXPECT_EQ(cm.at(a, b), n);
      }
  }
}

TEST(Report, CollapsedHandExample) {
  // Rows gt {bg, fg}: [[90,5],[3,2]].
  const MetricReport r = compute_report(from_rows({{90, 5}, {3, 2}}));
  EXPECT_NEAR(*r.recall_bin, 0.4, 1e-15);
  EXPECT_NEAR(*r.iou_bin, 0.2, 1e-15);
  EXPECT_NEAR(*r.precision_bin, 2.0 / 7.0, 1e-15);
  EXPECT_NEAR(*r.f1_anom, 4.0 / 12.0, 1e-15);
}

TEST(Report, PerfectAndAbsentClasses) {
  const MetricReport perfect = compute_report(from_rows({{10, 0, 0}, {0, 5, 0}, {0, 0, 2}}));
  for (const char* k : {"miou", "miou_anom", "f1_anom", "iou_bin", "recall_bin", "precision_bin", "f1_anom_per_class"})
    EXPECT_DOUBLE_EQ(*perfect.get(k), 1.0) << k;
  const MetricReport bg = compute_report(from_rows({{10, 0, 0}, {0, 0, 0}, {0, 0, 0}}));
  EXPECT_DOUBLE_EQ(*bg.miou, 1.0);
  EXPECT_FALSE(bg.miou_anom);
  EXPECT_FALSE(bg.per_class_iou[1]);
  EXPECT_FALSE(bg.recall_bin);
  const MetricReport empty = compute_report(ConfusionMatrix(3));
  EXPECT_FALSE(empty.miou);
  EXPECT_FALSE(empty.iou_bin);
}

TEST(Report, MatchesBruteForceOnRandomPairs) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 200; ++t) {
    const int labels = 2 + static_cast<int>(rng() % 3);
    const int n = 1 + static_cast<int>(rng() % 300);
    std::vector<int> p(n), g(n);
    std::vector<std::uint8_t> p8(n), g8(n);
    for (int i = 0; i < n; ++i) {
      // Skewed towards background, like real maps; some ignore pixels.
      p[i] = rng() % 3 == 0 ? static_cast<int>(rng() % labels) : 0;
      g[i] = rng() % 20 == 0 ? 255 : (rng() % 3 == 0 ? static_cast<int>(rng() % labels) : 0);
      p8[i] = static_cast<std::uint8_t>(p[i]);
      g8[i] = static_cast<std::uint8_t>(g[i]);
    }
    ConfusionMatrix cm(labels);
    accumulate(cm, p8, g8);
    const MetricReport r = compute_report(cm);
    const BruteForce b = brute_force(p, g, labels);
    for (int c = 0; c < labels; ++c) expect_metric(r.per_class_iou[c], b.iou[c], "iou");
    expect_metric(r.miou, b.miou, "miou");
    expect_metric(r.miou_anom, b.miou_anom, "miou_anom");
    expect_metric(r.iou_bin, b.iou_bin, "iou_bin");
    expect_metric(r.recall_bin, b.recall_bin, "recall_bin");
    expect_metric(r.precision_bin, b.precision_bin, "precision_bin");
    expect_metric(r.f1_anom, b.f1, "f1_anom");
    if (r.iou_bin && r.recall_bin) EXPECT_LE(*r.iou_bin, *r.recall_bin + 1e-15);
    if (r.iou_bin && r.precision_bin) EXPECT_LE(*r.iou_bin, *r.precision_bin + 1e-15);
  }
}

TEST(Report, TransposeScaleAndOrderInvariance) {
  std::mt19937_64 rng(12);
  std::vector<ConfusionMatrix> parts;
  for (int i = 0; i < 37; ++i) {
    ConfusionMatrix cm(3);
    for (int g = 0; g < 3; ++g)
      for (int q = 0; q < 3; ++q) cm.at(g, q) = rng() % 50;
    parts.push_back(cm);
  }
  ConfusionMatrix seq(3);
  for (const auto& p : parts) seq += p;
  for (int threads : {1, 2, 3, 8}) EXPECT_EQ(reduce_parallel(parts, threads), seq);
  auto shuffled = parts;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  ConfusionMatrix other(3);
  for (const auto& p : shuffled) other += p;
  EXPECT_EQ(other, seq);

  const MetricReport r = compute_report(seq), rt = compute_report(seq.transposed());
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(*r.per_class_iou[c], *rt.per_class_iou[c], 1e-15);
  EXPECT_NEAR(*r.iou_bin, *rt.iou_bin, 1e-15);
  EXPECT_NEAR(*r.recall_bin, *rt.precision_bin, 1e-15);
  ConfusionMatrix twice = seq;
  twice += seq;
  const MetricReport r2 = compute_report(twice);
  EXPECT_NEAR(*r2.miou, *r.miou, 1e-15);
  EXPECT_NEAR(*r2.f1_anom, *r.f1_anom, 1e-15);
}

TEST(Evaluate, GlobalAndPerImageAndMissingMap) {
  TempDir dir("eval");
  DatasetManifest m;
  m.class_names = {"dirt", "damage"};
  std::mt19937_64 rng(3);
  ConfusionMatrix brute(3);
  for (int i = 0; i < 2; ++i) {
    ImageRecord r;
    r.image_id = "t" + std::to_string(i);
    r.image_path = r.image_id + ".png";
    r.width = 9;
    r.height = 7;
    m.records.push_back(r);
    m.split_of[r.image_id] = Split::kTest;
    LabelGrid p(9, 7, 0), g(9, 7, 0);
    for (auto& v : p.values) v = rng() % 3;
    for (auto& v : g.values) v = rng() % 3;
    write_label_png(dir.path / "pred" / (r.image_id + ".png"), p);
    write_label_png(dir.path / "gt" / (r.image_id + ".png"), g);
    for (std::size_t k = 0; k < p.values.size(); ++k) ++brute.at(g.values[k], p.values[k]);
  }
  const Evaluation ev = evaluate(m, Split::kTest, dir.path / "pred", dir.path / "gt");
  EXPECT_EQ(ev.cm, brute);
  ASSERT_EQ(ev.per_image.size(), 2u);
  for (const auto& im : ev.per_image) EXPECT_TRUE(im.report.miou.has_value());
  // Predictions equal to ground truth score 1 everywhere.
  const Evaluation self = evaluate(m, Split::kTest, dir.path / "gt", dir.path / "gt");
  EXPECT_DOUBLE_EQ(*self.report.miou, 1.0);
  EXPECT_DOUBLE_EQ(*self.report.f1_anom, 1.0);
  std::filesystem::remove(dir.path / "pred" / "t1.png");
  try {
    evaluate(m, Split::kTest, dir.path / "pred", dir.path / "gt");
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("t1"), std::string::npos);
  }
}

TEST(Evaluate, SingleImageGlobalEqualsPerImage) {
  TempDir dir("eval1");
  DatasetManifest m;
  m.class_names = {"a", "b"};
  ImageRecord r;
  r.image_id = "only";
  r.image_path = "only.png";
  r.width = 5;
  r.height = 5;
  m.records.push_back(r);
  m.split_of["only"] = Split::kVal;
  LabelGrid p(5, 5, 0), g(5, 5, 0);
  p(1, 1) = 1;
  g(1, 1) = 1;
  g(2, 2) = 2;
  write_label_png(dir.path / "p" / "only.png", p);
  write_label_png(dir.path / "g" / "only.png", g);
  const Evaluation ev = evaluate(m, Split::kVal, dir.path / "p", dir.path / "g");
  EXPECT_EQ(compute_report(ev.cm).to_json(), ev.per_image[0].report.to_json());
}
