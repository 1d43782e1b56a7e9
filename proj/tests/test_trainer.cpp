#include <gtest/gtest.h>

#include <fstream>

#include "b2p/error.hpp"
#include "b2p/trainer.hpp"
#include "fixtures.hpp"
#include "json.hpp"

using namespace b2p;
using b2p::test::TempDir;

namespace {

std::vector<nlohmann::json> read_log(const std::filesystem::path& p) {
  std::vector<nlohmann::json> out;
  std::ifstream f(p);
  for (std::string line; std::getline(f, line);) out.push_back(nlohmann::json::parse(line));
  return out;
}

struct TinyRun {
  TempDir dir{"trainer"};
  SyntheticDataset ds;
  DatasetManifest manifest;
  TinyRun() {
    ds = emit_dataset(test::tiny_config(), dir.path / "data");
    manifest = load_manifest(ds.manifest_path).manifest;
  }
};

}  // namespace

TEST(Fit, ProducesRunDirectoryAndIsReproducible) {
  TinyRun run;
  const FitResult a = fit(run.ds.config, run.manifest, run.dir.path / "a");
  const FitResult b = fit(run.ds.config, run.manifest, run.dir.path / "b");
  for (const char* f : {"config.json", "train_log.jsonl", "ckpt_best.safetensors", "ckpt_last.safetensors"})
    EXPECT_TRUE(std::filesystem::exists(run.dir.path / "a" / f)) << f;
  ASSERT_EQ(a.steps.size(), 4u);  // 8 images / batch 4 * 2 epochs
  ASSERT_EQ(a.steps.size(), b.steps.size());
  for (std::size_t i = 0; i < a.steps.size(); ++i) {
    EXPECT_EQ(a.steps[i].loss_total, b.steps[i].loss_total);
    EXPECT_EQ(a.steps[i].grad_norm, b.steps[i].grad_norm);
  }
  // Logged losses are the in-memory ones, bit for bit.
  const auto log = read_log(run.dir.path / "a" / "train_log.jsonl");
  std::vector<double> logged;
  for (const auto& r : log)
    if (r["type"] == "step") logged.push_back(r["loss_total"].get<double>());
  ASSERT_EQ(logged.size(), a.steps.size());
  for (std::size_t i = 0; i < logged.size(); ++i) EXPECT_EQ(logged[i], a.steps[i].loss_total);
  EXPECT_EQ(log.front()["type"], "start");
  EXPECT_EQ(log.back()["type"], "end");
  // The snapshot alone reproduces the run.
  const TrainingConfig snap = load_config(run.dir.path / "a" / "config.json");
  const FitResult c = fit(snap, run.manifest, run.dir.path / "c");
  EXPECT_EQ(c.steps.back().loss_total, a.steps.back().loss_total);
}

TEST(Fit, WarmupGatesCorrectionAndStepsFollowSchedule) {
  TinyRun run;
  TrainingConfig cfg = run.ds.config;
  cfg.loss.tau = 0.01;  // nearly any defect prediction qualifies
  const FitResult r = fit(cfg, run.manifest, run.dir.path / "w");
  // Warm-up defaults to one epoch: two steps here.
  EXPECT_EQ(r.steps[0].pixels_corrected, 0u);
  EXPECT_EQ(r.steps[1].pixels_corrected, 0u);
  EXPECT_GT(r.steps[0].pixels_eligible, 0u);
  EXPECT_EQ(r.steps[0].lr, cfg.lr);
  EXPECT_NEAR(r.steps.back().lr, cosine_lr(3, 4, cfg.lr, cfg.schedule.min_lr_factor), 1e-18);
  for (const auto& s : r.steps) EXPECT_LE(s.grad_norm, 1e6);
}

TEST(Fit, BackboneWeightsStayFrozen) {
  TinyRun run;
  TrainingConfig cfg = run.ds.config;
  cfg.epochs = 3;
  // Construction is deterministic, so a fresh student shows fit's initial state.
  std::map<std::string, FloatBuffer> before;
  {
    Student init(cfg.model);
    for (const auto* p : init.state())
      if (p->in_backbone) before[p->name] = p->value.vec();
  }
  FitOptions opts;
  opts.on_step = [&](const StepRecord&, Student& model) {
    for (const auto* p : model.state())
      if (p->in_backbone && p->role == nn::ParamRole::kWeight) ASSERT_EQ(p->value.vec(), before.at(p->name)) << p->name;
  };
  const FitResult r = fit(cfg, run.manifest, run.dir.path / "f", opts);
  const Checkpoint ck = load_checkpoint(r.last_checkpoint);
  int moved = 0;
  for (const auto& [name, v] : before)
    if (ck.model.at(name).vec() != v) ++moved;
  EXPECT_GE(moved, 1);
}

TEST(Fit, NonFiniteLossAborts) {
  TinyRun run;
  FitOptions opts;
  opts.on_step = [](const StepRecord& s, Student& model) {
    if (s.step == 1)
      for (auto* p : model.trainable_parameters())
        if (!p->in_backbone) p->value.fill(std::numeric_limits<float>::quiet_NaN());
  };
  EXPECT_THROW(fit(run.ds.config, run.manifest, run.dir.path / "nan", opts), TrainingAbort);
  EXPECT_TRUE(std::filesystem::exists(run.dir.path / "nan" / "abort_dump.json"));
  EXPECT_EQ(read_log(run.dir.path / "nan" / "train_log.jsonl").back()["type"], "abort");
}

TEST(Fit, InputErrors) {
  TinyRun run;
  TrainingConfig cfg = run.ds.config;
  cfg.model.num_classes = 3;
  EXPECT_THROW(fit(cfg, run.manifest, run.dir.path / "k"), ConfigError);
  cfg = run.ds.config;
  cfg.model.backbone = nn::BackboneSpec::pretrained_vit_s14();
  EXPECT_THROW(fit(cfg, run.manifest, run.dir.path / "p"), ConfigError);
  const PseudoLabelCache cache(run.ds.config.data.cache_root, teacher_fingerprint(run.ds.config.teacher));
  std::filesystem::remove(cache.path_for("train_0003"));
  try {
    fit(run.ds.config, run.manifest, run.dir.path / "miss");
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("train_0003"), std::string::npos);
  }
}

TEST(Checkpoint, RoundTripAndPredictionsMatch) {
  TinyRun run;
  Student model(run.ds.config.model);
  CheckpointMeta meta;
  meta.step = 12;
  meta.epoch = 3;
  meta.metric_name = "miou_anom";
  meta.metric = 0.25;
  meta.config_hash = config_hash(run.ds.config);
  const auto path = run.dir.path / "ck.safetensors";
  EmaState ema(model.state(), 0.9);
  save_checkpoint(path, run.ds.config, meta, model, &ema);
  const Checkpoint ck = load_checkpoint(path);
  EXPECT_EQ(ck.meta.step, 12);
  EXPECT_EQ(ck.meta.epoch, 3);
  EXPECT_EQ(ck.meta.metric, 0.25);
  EXPECT_EQ(config_to_json(ck.config), config_to_json(run.ds.config));
  auto restored = student_from_checkpoint(ck, false);
  const RgbImage img = read_image(run.manifest.resolve(run.manifest.records[0].image_path));
  const Prediction p0 = predict(model, img), p1 = predict(*restored, img);
  EXPECT_EQ(p0.classes, p1.classes);
  EXPECT_EQ(p0.foreground.values, p1.foreground.values);
  EXPECT_EQ(p0.classes.width, img.width);

  EXPECT_THROW(load_checkpoint(run.dir.path / "nope.safetensors"), IoError);
  std::ofstream(run.dir.path / "junk.safetensors") << "garbage";
  EXPECT_THROW(load_checkpoint(run.dir.path / "junk.safetensors"), Error);
}

TEST(Predict, WrittenMapsReproduceInMemoryEvaluation) {
  TinyRun run;
  Student model(run.ds.config.model);
  const auto gt_dir = run.ds.gt_dir;
  const LabelSource gt = [&](const ImageRecord& r) { return read_label_png(gt_dir / (r.image_id + ".png")); };
  const Evaluation mem = evaluate_model(model, run.manifest, Split::kTest, gt);
  write_predictions(model, run.manifest, Split::kTest, run.dir.path / "pred");
  EXPECT_TRUE(std::filesystem::exists(run.dir.path / "pred" / "test_0000_prob.png"));
  const Evaluation disk = evaluate(run.manifest, Split::kTest, run.dir.path / "pred", gt_dir);
  EXPECT_EQ(mem.cm, disk.cm);
}
