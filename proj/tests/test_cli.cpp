#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "b2p/cli.hpp"
#include "b2p/config.hpp"
#include "fixtures.hpp"
#include "json.hpp"

using namespace b2p;
using b2p::test::TempDir;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

void write_config(const fs::path& p, const TrainingConfig& c) { std::ofstream(p) << config_to_json(c); }

// Three plain images with boxes and a boxfill-teacher config.
fs::path boxfill_project(const fs::path& root) {
  DatasetManifest m;
  m.class_names = {"dirt", "damage"};
  fs::create_directories(root / "images");
  for (int i = 0; i < 3; ++i) {
    ImageRecord r;
    r.image_id = "p" + std::to_string(i);
    r.image_path = "images/" + r.image_id + ".png";
    r.annotation_path = "labels/" + r.image_id + ".txt";
    r.width = r.height = 32;
    r.boxes.push_back({i % 2, 0.5, 0.5, 0.25, 0.25});
    write_rgb_png(root / r.image_path, RgbImage(32, 32));
    m.records.push_back(r);
    m.split_of[r.image_id] = i == 2 ? Split::kVal : Split::kTrain;
  }
  save_manifest(m, root / "manifest.json");
  TrainingConfig c = test::tiny_config();
  c.teacher = TeacherConfig{};
  c.data.manifest = (root / "manifest.json").string();
  c.data.cache_root = (root / "cache").string();
  c.epochs = 2;
  write_config(root / "config.json", c);
  return root / "config.json";
}

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(cli({}).code, kExitConfig);
  EXPECT_EQ(cli({"frobnicate"}).code, kExitConfig);
  EXPECT_EQ(cli({"train"}).code, kExitConfig);  // --output missing
  EXPECT_EQ(cli({"--help"}).code, kExitOk);
  TempDir dir("cli-usage");
  const auto cfg = boxfill_project(dir.path);
  const Result r = cli({"train", "--config", cfg.string(), "--override", "loss.gamma=1", "--output", (dir.path / "r").string()});
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_NE(r.err.find("loss.gamma"), std::string::npos);
}

TEST(Cli, PseudoLabelThenTrain) {
  TempDir dir("cli-pl");
  const auto cfg = boxfill_project(dir.path);
  const Result first = cli({"pseudo-label", "--config", cfg.string()});
  ASSERT_EQ(first.code, kExitOk) << first.err;
  const fs::path fp_dir = fs::path(load_config(cfg).data.cache_root) / teacher_fingerprint(TeacherConfig{});
  int pngs = 0;
  for (const auto& e : fs::directory_iterator(fp_dir)) pngs += e.path().extension() == ".png";
  EXPECT_EQ(pngs, 3);
  EXPECT_TRUE(fs::exists(fp_dir / "report.json"));
  const Result again = cli({"pseudo-label", "--config", cfg.string()});
  EXPECT_NE(again.out.find("generated 0, cache hits 3"), std::string::npos) << again.out;

  const fs::path run = dir.path / "run";
  const Result tr = cli({"train", "--config", cfg.string(), "--override", "loss.tau=0.95", "--output", run.string()});
  ASSERT_EQ(tr.code, kExitOk) << tr.err;
  EXPECT_TRUE(fs::exists(run / "ckpt_best.safetensors"));
  EXPECT_TRUE(fs::exists(run / "ckpt_last.safetensors"));
  EXPECT_EQ(load_config(run / "config.json").loss.tau, 0.95);

  fs::remove(fp_dir / "p1.png");
  const Result miss = cli({"train", "--config", cfg.string(), "--output", (dir.path / "run2").string()});
  EXPECT_EQ(miss.code, kExitConfig);
  EXPECT_NE(miss.err.find("p1"), std::string::npos);
}

TEST(Cli, UnreachableTeacherExitsTwo) {
  TempDir dir("cli-teacher");
  const auto cfg = boxfill_project(dir.path);
  const std::vector<std::string> base{"pseudo-label", "--config", cfg.string(), "--override", "teacher.kind=foundation",
                                      "--override", "teacher.endpoint=http://127.0.0.1:1/segment", "--override",
                                      "teacher.max_retries=0"};
  const Result r = cli(base);
  EXPECT_EQ(r.code, kExitTeacher);
  EXPECT_NE(r.err.find("p0"), std::string::npos);
  auto partial = base;
  partial.push_back("--allow-partial");
  EXPECT_EQ(cli(partial).code, kExitOk);
}

TEST(Cli, EvalAndPredict) {
  TempDir dir("cli-eval");
  TrainingConfig c = test::tiny_config();
  const SyntheticDataset ds = emit_dataset(c, dir.path / "data");
  const fs::path cfg = dir.path / "data" / "config.json";

  // Ground truth against itself.
  const Result self = cli({"eval", "--config", cfg.string(), "--predictions", ds.gt_dir.string(), "--ground-truth",
                           ds.gt_dir.string(), "--output", (dir.path / "self").string()});
  ASSERT_EQ(self.code, kExitOk) << self.err;
  const auto rep = nlohmann::json::parse(std::ifstream(dir.path / "self" / "report.json"));
  for (const char* k : {"miou", "miou_anom", "f1_anom", "iou_bin", "recall_bin"}) EXPECT_EQ(rep["report"][k], 1.0) << k;

  const fs::path run = dir.path / "run";
  ASSERT_EQ(cli({"train", "--config", cfg.string(), "--output", run.string()}).code, kExitOk);
  const fs::path pred = dir.path / "pred";
  const Result p = cli({"predict", "--checkpoint", (run / "ckpt_best.safetensors").string(), "--output", pred.string()});
  ASSERT_EQ(p.code, kExitOk) << p.err;
  EXPECT_TRUE(fs::exists(pred / "test_0001.png"));
  EXPECT_TRUE(fs::exists(pred / "test_0001_prob.png"));
  EXPECT_EQ(cli({"eval", "--config", cfg.string(), "--predictions", pred.string(), "--ground-truth", ds.gt_dir.string()}).code,
            kExitOk);
  fs::remove(pred / "test_0001.png");
  const Result miss = cli({"eval", "--config", cfg.string(), "--predictions", pred.string(), "--ground-truth", ds.gt_dir.string()});
  EXPECT_EQ(miss.code, kExitConfig);
  EXPECT_NE(miss.err.find("test_0001"), std::string::npos);
  EXPECT_EQ(cli({"predict", "--checkpoint", (run / "missing").string(), "--output", pred.string()}).code, kExitConfig);
}

TEST(Cli, NonFiniteTrainingExitsThree) {
  TempDir dir("cli-abort");
  TrainingConfig c = test::tiny_config();
  const SyntheticDataset ds = emit_dataset(c, dir.path / "data");
  // A learning rate this large overflows float32 within a few steps.
  const Result r = cli({"train", "--config", (dir.path / "data" / "config.json").string(), "--override", "lr=1e30",
                        "--override", "clip_norm=1e30", "--output", (dir.path / "run").string()});
  EXPECT_EQ(r.code, kExitAbort) << r.err;
}

TEST(Cli, SynthBenchSeeds) {
  TempDir dir("cli-bench");
  TrainingConfig c = test::tiny_config();
  c.epochs = 1;
  write_config(dir.path / "bench.json", c);
  const Result r = cli({"synth-bench", "--config", (dir.path / "bench.json").string(), "--seeds", "2", "--output",
                        (dir.path / "out").string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto rep = nlohmann::json::parse(std::ifstream(dir.path / "out" / "report.json"));
  EXPECT_EQ(rep["rows"].size(), 2u);
  EXPECT_TRUE(rep.contains("mean_recall_delta"));
  EXPECT_TRUE(fs::exists(dir.path / "out" / "report.txt"));
}
