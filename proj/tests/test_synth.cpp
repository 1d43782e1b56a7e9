#include <gtest/gtest.h>

#include "b2p/error.hpp"
#include "b2p/synth.hpp"
#include "fixtures.hpp"
#include "json.hpp"

using namespace b2p;
using b2p::test::TempDir;

namespace {

long count_fg(const LabelGrid& g) {
  long n = 0;
  for (auto v : g.values) n += v != 0;
  return n;
}

}  // namespace

TEST(Scene, DeterministicPerSeedAndId) {
  SceneConfig cfg;
  cfg.seed = 4;
  const auto a = generate_scene(cfg, "x");
  const auto b = generate_scene(cfg, "x");
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.gt, b.gt);
  EXPECT_EQ(a.boxes, b.boxes);
  const auto c = generate_scene(cfg, "y");
  EXPECT_NE(a.image, c.image);
  cfg.seed = 5;
  EXPECT_NE(generate_scene(cfg, "x").image, a.image);
}

TEST(Scene, NoDefectsWhenFractionZero) {
  SceneConfig cfg;
  cfg.defect_image_fraction = 0.0;
  for (int i = 0; i < 20; ++i) {
    const auto s = generate_scene(cfg, std::to_string(i));
    EXPECT_EQ(count_fg(s.gt), 0);
    EXPECT_TRUE(s.boxes.empty());
  }
}

TEST(Scene, BoxesAreTightHullsAndDefectsAreSparse) {
  SceneConfig cfg;
  double total = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto s = generate_scene(cfg, "s" + std::to_string(i));
    const double frac = static_cast<double>(count_fg(s.gt)) / static_cast<double>(s.gt.size());
    EXPECT_LT(frac, 0.10);
    total += frac;
    ASSERT_EQ(s.boxes.size(), s.components.size());
    for (std::size_t k = 0; k < s.boxes.size(); ++k) {
      const PixelBox hull = s.components[k].box;
      EXPECT_EQ(box_to_pixels(s.boxes[k], cfg.image_size, cfg.image_size), hull);
      EXPECT_EQ(s.boxes[k].class_id, s.components[k].class_id);
      // Tight: every edge row/column of the hull holds a labelled pixel.
      const auto label = static_cast<std::uint8_t>(s.components[k].class_id + 1);
      bool top = false, bottom = false, left = false, right = false;
      for (int y = hull.y0; y < hull.y1; ++y)
        for (int x = hull.x0; x < hull.x1; ++x)
          if (s.gt(x, y) == label) {
            top |= y == hull.y0;
            bottom |= y == hull.y1 - 1;
            left |= x == hull.x0;
            right |= x == hull.x1 - 1;
          }
      EXPECT_TRUE(top && bottom && left && right);
    }
  }
  EXPECT_LT(total / 1000.0, 0.05);
}

TEST(CorruptTeacher, ZeroNoiseReproducesGroundTruth) {
  SceneConfig cfg;
  cfg.defect_image_fraction = 1.0;
  for (int i = 0; i < 30; ++i) {
    auto s = generate_scene(cfg, std::to_string(i));
    corrupt_teacher(s, NoiseProfile::none(), 0, std::to_string(i));
    EXPECT_EQ(s.kept_boxes.size(), s.boxes.size());
    EXPECT_EQ(s.pseudo, s.gt);
    EXPECT_EQ(s.teacher_masks.size(), s.boxes.size());
  }
}

TEST(CorruptTeacher, DropAllGivesBackground) {
  SceneConfig cfg;
  cfg.defect_image_fraction = 1.0;
  NoiseProfile noise = NoiseProfile::none();
  noise.fn_component_drop_rate = 1.0;
  auto s = generate_scene(cfg, "d");
  corrupt_teacher(s, noise, 0, "d");
  EXPECT_EQ(count_fg(s.pseudo), 0);
}

TEST(CorruptTeacher, ErosionOnlyIsPureFalseNegative) {
  SceneConfig cfg;
  cfg.defect_image_fraction = 1.0;
  NoiseProfile noise = NoiseProfile::none();
  noise.fn_erode_radius = 1;
  long gt_fg = 0, kept = 0;
  for (int i = 0; i < 30; ++i) {
    auto s = generate_scene(cfg, std::to_string(i));
    corrupt_teacher(s, noise, 0, std::to_string(i));
    for (std::size_t k = 0; k < s.pseudo.size(); ++k) {
      if (s.pseudo.values[k]) ASSERT_EQ(s.pseudo.values[k], s.gt.values[k]);
      gt_fg += s.gt.values[k] != 0;
      kept += s.pseudo.values[k] != 0;
    }
  }
  EXPECT_LT(static_cast<double>(kept) / static_cast<double>(gt_fg), 1.0);
}

TEST(CorruptTeacher, MasksStayInsideBoxesAndOmissionDropsBoxes) {
  SceneConfig cfg;
  cfg.defect_image_fraction = 1.0;
  NoiseProfile noise;
  noise.fp_blob_rate = 4.0;
  noise.box_omission_rate = 0.5;
  std::size_t total = 0, kept = 0;
  for (int i = 0; i < 50; ++i) {
    auto s = generate_scene(cfg, std::to_string(i));
    corrupt_teacher(s, noise, 3, std::to_string(i));
    total += s.boxes.size();
    kept += s.kept_boxes.size();
    ASSERT_EQ(s.teacher_masks.size(), s.kept_boxes.size());
    for (std::size_t m = 0; m < s.teacher_masks.size(); ++m) {
      const PixelBox box = box_to_pixels(s.boxes[static_cast<std::size_t>(s.kept_boxes[m])], cfg.image_size, cfg.image_size);
      const auto& mask = s.teacher_masks[m].mask;
      for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x)
          if (mask(x, y)) ASSERT_TRUE(box.contains(x, y));
    }
  }
  EXPECT_LT(kept, total);
  EXPECT_GT(kept, 0u);
}

TEST(EmitDataset, CacheMatchesDirectCorruption) {
  TempDir dir("emit");
  TrainingConfig cfg = test::tiny_config();
  cfg.teacher.noise.box_omission_rate = 0.3;
  const SyntheticDataset ds = emit_dataset(cfg, dir.path);
  const DatasetManifest m = load_manifest(ds.manifest_path).manifest;
  EXPECT_EQ(m.class_names, kSyntheticClasses);
  EXPECT_EQ(m.records.size(), 12u);
  EXPECT_TRUE(ds.pseudo_labels.failures.empty());
  const PseudoLabelCache cache(ds.config.data.cache_root, teacher_fingerprint(ds.config.teacher));
  for (const ImageRecord* rec : m.records_in(Split::kTrain)) {
    SyntheticSample s = generate_scene(cfg.synth.scene, rec->image_id);
    corrupt_teacher(s, cfg.teacher.noise, cfg.teacher.seed, rec->image_id, cfg.teacher.overlap_policy);
    EXPECT_EQ(cache.load(rec->image_id).value(), s.pseudo) << rec->image_id;
    EXPECT_EQ(rec->boxes.size(), s.kept_boxes.size());
    // Omitted components stay in the ground truth.
    EXPECT_EQ(read_label_png(ds.gt_dir / (rec->image_id + ".png")), s.gt);
  }
  // Test images are not pseudo-labelled.
  EXPECT_FALSE(cache.contains("test_0000"));
}

TEST(Ablation, DropAllWithoutWarmupStaysFinite) {
  TempDir dir("dropall");
  TrainingConfig cfg = test::tiny_config();
  cfg.teacher.noise.fn_component_drop_rate = 1.0;
  cfg.loss.warmup_steps = 0;
  const SyntheticDataset ds = emit_dataset(cfg, dir.path / "data");
  const AblationRun run = run_ablation(ds, true, dir.path / "run");
  for (const auto& s : run.fit.steps) EXPECT_TRUE(std::isfinite(s.loss_total));
}

TEST(Bench, ReportHasPairedRowsAndMeans) {
  TempDir dir("bench");
  TrainingConfig cfg = test::tiny_config();
  cfg.epochs = 1;
  const BenchReport report = run_bench(cfg, 2, dir.path);
  ASSERT_EQ(report.rows.size(), 2u);
  EXPECT_EQ(report.rows[0].seed, 0u);
  EXPECT_EQ(report.rows[1].seed, 1u);
  const auto j = nlohmann::json::parse(report.to_json());
  EXPECT_EQ(j["rows"].size(), 2u);
  EXPECT_TRUE(j.contains("mean_recall_delta"));
  EXPECT_TRUE(j["rows"][0].contains("recall_delta"));
  EXPECT_NE(report.to_table().find("mean"), std::string::npos);
  // Both arms of a row share the dataset, so their inputs are identical.
  EXPECT_EQ(report.rows[0].off.fit.class_weights, report.rows[0].on.fit.class_weights);
  EXPECT_THROW(run_bench(cfg, 0, dir.path / "none"), ConfigError);
}
