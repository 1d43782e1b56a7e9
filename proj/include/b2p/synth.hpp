#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "b2p/annotations.hpp"
#include "b2p/config.hpp"
#include "b2p/image.hpp"
#include "b2p/metrics.hpp"
#include "b2p/pseudo_labels.hpp"
#include "b2p/teacher.hpp"
#include "b2p/trainer.hpp"

namespace b2p {

// Class ids of the synthetic two-class setting.
inline constexpr int kDirtClass = 0;
inline constexpr int kDamageClass = 1;
inline const std::vector<std::string> kSyntheticClasses{"dirt", "damage"};

// Desk-scale training preset for the synthetic benchmark: stub backbone,
// narrow decoder, noisy ground-truth teacher, EMA warm-up.
TrainingConfig bench_config();

struct SceneComponent {
  int class_id = 0;
  PixelBox box;  // tight hull of the component's pixels
};

struct SyntheticSample {
  RgbImage image;
  LabelGrid gt;                         // 0 background, class_id + 1 for defects
  std::vector<SceneComponent> components;
  std::vector<BoxAnnotation> boxes;     // one per component, before omission
  // Filled by corrupt_teacher.
  std::vector<int> kept_boxes;          // indices into boxes
  std::vector<TeacherMask> teacher_masks;
  LabelGrid pseudo;
};

SyntheticSample generate_scene(const SceneConfig& cfg, std::mt19937_64& rng);
// Scene keyed by (cfg.seed, image_id).
SyntheticSample generate_scene(const SceneConfig& cfg, const std::string& image_id);

// Applies box omission, then the noisy ground-truth teacher on the kept
// boxes, then rasterization. Randomness is keyed on (seed, image_id).
void corrupt_teacher(SyntheticSample& sample, const NoiseProfile& noise, std::uint64_t seed,
                     const std::string& image_id,
                     OverlapPolicy policy = OverlapPolicy::kHighestClassPriority);

struct SyntheticDataset {
  std::filesystem::path root;
  std::filesystem::path manifest_path;
  std::filesystem::path gt_dir;
  TrainingConfig config;  // data paths and teacher section point at this dataset
  PseudoLabelReport pseudo_labels;
};

// Writes images/, labels/ (YOLO), gt/, manifest.json, config.json and fills
// the pseudo-label cache through the regular teacher pipeline.
SyntheticDataset emit_dataset(const TrainingConfig& cfg, const std::filesystem::path& out_dir);

struct AblationRun {
  MetricReport test;           // student vs clean ground truth on the test split
  CorrectionStats correction;  // accumulated over training
  FitResult fit;
};

AblationRun run_ablation(const SyntheticDataset& dataset, bool with_correction,
                         const std::filesystem::path& run_dir, const FitOptions& options = {});

struct AblationRow {
  std::uint64_t seed = 0;
  AblationRun off;
  AblationRun on;
  Metric recall_delta() const;
  Metric miou_anom_delta() const;
  double corrected_fraction_on() const;
};

struct BenchReport {
  std::vector<AblationRow> rows;
  Metric mean_recall_delta() const;
  Metric mean_miou_anom_delta() const;
  std::string to_json() const;
  std::string to_table() const;
};

// Paired correction-off / correction-on runs over `seeds` consecutive seeds
// starting at cfg.seed. Each seed gets its own dataset under out_dir.
BenchReport run_bench(const TrainingConfig& cfg, int seeds, const std::filesystem::path& out_dir,
                      const FitOptions& options = {});

}  // namespace b2p
