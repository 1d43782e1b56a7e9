#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "b2p/objectives.hpp"
#include "b2p/student.hpp"
#include "b2p/teacher.hpp"

namespace b2p {

struct ScheduleConfig {
  std::string kind = "cosine";
  double min_lr_factor = 0.01;
};

struct DataConfig {
  std::string manifest;    // path to manifest.json
  std::string cache_root;  // pseudo-label cache directory
};

// Synthetic scene generator and benchmark sizes.
struct SceneConfig {
  int image_size = 128;
  double noise_scale = 12.0;        // background texture amplitude (gray levels)
  double gradient_strength = 40.0;  // illumination ramp amplitude
  double defect_image_fraction = 0.6;
  int max_defects_per_image = 3;
  double damage_contrast = 70.0;    // darkening of strokes
  double dirt_contrast = 45.0;      // tint of blobs
  std::uint64_t seed = 0;

  void validate() const;
};

struct SynthConfig {
  SceneConfig scene;
  int train_images = 96;
  int val_images = 16;
  int test_images = 32;
};

struct TrainingConfig {
  std::uint64_t seed = 0;
  double lr = 5e-4;
  double weight_decay = 1e-2;
  double clip_norm = 1.0;
  double ema_decay = 0.999;
  bool ema_warmup = false;  // decay ramps as min(decay, (1+n)/(10+n))
  int epochs = 50;
  int batch_size = 8;
  ScheduleConfig schedule;
  std::string selection_metric = "miou_anom";
  bool augment_hflip = true;
  int min_defect_images_per_batch = 0;
  LossConfig loss;
  ModelConfig model;
  TeacherConfig teacher;
  DataConfig data;
  SynthConfig synth;

  void validate() const;  // throws ConfigError
};

// JSON round trip. Unknown keys are rejected; missing keys keep defaults.
std::string config_to_json(const TrainingConfig& cfg, int indent = 2);
TrainingConfig config_from_json(const std::string& text);
TrainingConfig load_config(const std::filesystem::path& path);

// Applies "a.b.c=value" overrides. The key must already exist in the
// serialized config; the value is parsed as JSON, falling back to a plain
// string.
TrainingConfig apply_overrides(const TrainingConfig& cfg, const std::vector<std::string>& overrides);

// Stable hash of the serialized config.
std::string config_hash(const TrainingConfig& cfg);

}  // namespace b2p
