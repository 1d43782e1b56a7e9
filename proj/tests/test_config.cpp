#include <gtest/gtest.h>

#include <fstream>

#include "b2p/config.hpp"
#include "b2p/error.hpp"
#include "json.hpp"
#include "test_util.hpp"

using namespace b2p;
using b2p::test::TempDir;

TEST(Config, DefaultsFollowTrainingProtocol) {
  const TrainingConfig c;
  EXPECT_EQ(c.lr, 5e-4);
  EXPECT_EQ(c.weight_decay, 1e-2);
  EXPECT_EQ(c.clip_norm, 1.0);
  EXPECT_EQ(c.ema_decay, 0.999);
  EXPECT_EQ(c.loss.beta, 0.4);
  EXPECT_EQ(c.loss.tau, 0.9);
  EXPECT_EQ(c.selection_metric, "miou_anom");
  EXPECT_EQ(c.model.input_size, 518);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, JsonRoundTrip) {
  TrainingConfig c;
  c.seed = 17;
  c.loss.class_weights = {1.0, 2.5, 3.0};
  c.loss.warmup_steps = 40;
  c.model = ModelConfig::desk_scale(64);
  c.teacher.kind = TeacherKind::kSyntheticNoisy;
  c.teacher.noise.fp_blob_rate = 0.25;
  c.data.manifest = "m.json";
  const TrainingConfig back = config_from_json(config_to_json(c));
  EXPECT_EQ(config_to_json(back), config_to_json(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
  TrainingConfig d = c;
  d.loss.tau = 0.95;
  EXPECT_NE(config_hash(d), config_hash(c));
  // "auto" and null survive too.
  const TrainingConfig dflt = config_from_json(config_to_json(TrainingConfig{}));
  EXPECT_TRUE(dflt.loss.class_weights.empty());
  EXPECT_FALSE(dflt.loss.warmup_steps.has_value());
}

TEST(Config, UnknownKeysRejected) {
  EXPECT_THROW(config_from_json(R"({"lr": 1e-3, "learning_rate": 1})"), ConfigError);
  EXPECT_THROW(config_from_json(R"({"loss": {"tau": 0.9, "gamma": 1}})"), ConfigError);
  EXPECT_NO_THROW(config_from_json(R"({"loss": {"tau": 0.8}})"));
  EXPECT_EQ(config_from_json(R"({"loss": {"tau": 0.8}})").loss.beta, 0.4);
}

TEST(Config, Overrides) {
  const TrainingConfig c = apply_overrides(TrainingConfig{}, {"loss.tau=0.95", "epochs=3", "teacher.kind=oracle_gt",
                                                              "loss.class_weights=[1,2,3]", "schedule.kind=constant"});
  EXPECT_EQ(c.loss.tau, 0.95);
  EXPECT_EQ(c.epochs, 3);
  EXPECT_EQ(c.teacher.kind, TeacherKind::kOracleGt);
  EXPECT_EQ(c.loss.class_weights, (std::vector<double>{1, 2, 3}));
  EXPECT_EQ(c.schedule.kind, "constant");
  EXPECT_NE(config_to_json(c).find("0.95"), std::string::npos);
  EXPECT_THROW(apply_overrides(TrainingConfig{}, {"loss.gamma=1"}), ConfigError);
  EXPECT_THROW(apply_overrides(TrainingConfig{}, {"no_equals_sign"}), ConfigError);
  EXPECT_THROW(apply_overrides(TrainingConfig{}, {"epochs=\"many\""}), ConfigError);
}

TEST(Config, ValidationRejectsBadValues) {
  TrainingConfig c;
  c.lr = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainingConfig{};
  c.ema_decay = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainingConfig{};
  c.clip_norm = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainingConfig{};
  c.loss.tau = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainingConfig{};
  c.selection_metric = "accuracy";
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, LoadFromFile) {
  TempDir dir("cfg");
  std::ofstream(dir.path / "c.json") << R"({"epochs": 2, "model": {"backbone": {"kind": "test_stub"}}})";
  const TrainingConfig c = load_config(dir.path / "c.json");
  EXPECT_EQ(c.epochs, 2);
  EXPECT_EQ(c.model.backbone.kind, nn::BackboneKind::kTestStub);
  EXPECT_EQ(c.model.backbone.depth, 8);
  EXPECT_THROW(load_config(dir.path / "missing.json"), Error);
  std::ofstream(dir.path / "bad.json") << "{ not json";
  EXPECT_THROW(load_config(dir.path / "bad.json"), Error);
}
