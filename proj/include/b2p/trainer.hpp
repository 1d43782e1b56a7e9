#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "b2p/config.hpp"
#include "b2p/manifest.hpp"
#include "b2p/metrics.hpp"
#include "b2p/objectives.hpp"
#include "b2p/optim.hpp"
#include "b2p/student.hpp"

namespace b2p {

struct CheckpointMeta {
  long step = 0;
  int epoch = 0;
  std::string metric_name;
  Metric metric;
  std::string config_hash;
  std::string teacher_fingerprint;
};

struct Checkpoint {
  TrainingConfig config;
  CheckpointMeta meta;
  std::map<std::string, Tensor> model;
  std::map<std::string, Tensor> ema;  // empty when saved without EMA
};

inline constexpr const char* kCheckpointFormat = "b2p-checkpoint";
inline constexpr int kCheckpointVersion = 1;

// Safetensors archive; tensors are stored as "model/<name>" and
// "ema/<name>", config and meta as header metadata.
void save_checkpoint(const std::filesystem::path& path, const TrainingConfig& cfg,
                     const CheckpointMeta& meta, const Student& model, const EmaState* ema);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Builds a student from a checkpoint, loading EMA weights when requested
// and present.
std::unique_ptr<Student> student_from_checkpoint(const Checkpoint& ckpt, bool use_ema = true);

struct Prediction {
  LabelGrid classes;            // argmax of the fine head, original resolution
  Grid<float> foreground;       // binary-head foreground probability
};

// Eval-mode inference on one image; logits are resized back to the image's
// own resolution before the argmax.
Prediction predict(Student& model, const RgbImage& image);

// Predicts every image of a split and scores against label maps supplied
// by `labels` (pseudo-labels or ground truth). Optionally writes the
// predictions to `out_dir` as <id>.png (classes) and <id>_prob.png
// (foreground probability, 0..255).
using LabelSource = std::function<LabelGrid(const ImageRecord&)>;
Evaluation evaluate_model(Student& model, const DatasetManifest& manifest, Split split,
                          const LabelSource& labels);
void write_predictions(Student& model, const DatasetManifest& manifest, Split split,
                       const std::filesystem::path& out_dir);

struct StepRecord {
  long step = 0;
  int epoch = 0;
  double lr = 0;
  double loss_total = 0, loss_bin = 0, loss_fine = 0;
  double grad_norm = 0;
  std::uint64_t pixels_corrected = 0;
  std::uint64_t pixels_eligible = 0;
};

struct EpochRecord {
  int epoch = 0;
  long step = 0;
  MetricReport val;
  CorrectionStats correction;
  bool selected = false;
};

struct FitResult {
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  CorrectionStats correction;  // whole run
  Metric best_metric;
  int best_epoch = 0;
  std::vector<double> class_weights;
};

struct FitOptions {
  bool quiet = true;
  // Called after every optimizer step (tests use it to inspect the model).
  std::function<void(const StepRecord&, Student&)> on_step;
};

// Full optimization run. run_dir receives config.json, train_log.jsonl,
// ckpt_best.safetensors and ckpt_last.safetensors.
FitResult fit(const TrainingConfig& cfg, const DatasetManifest& manifest,
              const std::filesystem::path& run_dir, const FitOptions& options = {});

// Class weights from cached train pseudo-labels (inverse frequency) unless
// configured explicitly.
std::vector<double> resolve_class_weights(const TrainingConfig& cfg, const DatasetManifest& manifest);

}  // namespace b2p
