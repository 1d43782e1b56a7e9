#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "b2p/image.hpp"
#include "b2p/manifest.hpp"

namespace b2p {

inline constexpr int kIgnoreLabel = 255;

// Rows are ground truth, columns are predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_labels = 0) : n_(num_labels), counts_(static_cast<std::size_t>(num_labels) * num_labels, 0) {}

  int num_labels() const { return n_; }
  std::uint64_t& at(int gt, int pred) { return counts_[static_cast<std::size_t>(gt) * n_ + pred]; }
  std::uint64_t at(int gt, int pred) const { return counts_[static_cast<std::size_t>(gt) * n_ + pred]; }
  std::uint64_t total() const;
  std::uint64_t row_sum(int c) const;
  std::uint64_t col_sum(int c) const;
  ConfusionMatrix& operator+=(const ConfusionMatrix& o);
  bool operator==(const ConfusionMatrix& o) const = default;
  ConfusionMatrix transposed() const;
  const std::vector<std::uint64_t>& counts() const { return counts_; }

 private:
  int n_ = 0;
  std::vector<std::uint64_t> counts_;
};

// cm[gt, pred] += 1 per pixel; pixels whose gt equals ignore_label are
// skipped. Other labels outside [0, num_labels) are errors.
void accumulate(ConfusionMatrix& cm, std::span<const std::uint8_t> pred,
                std::span<const std::uint8_t> gt, int ignore_label = kIgnoreLabel);
void accumulate(ConfusionMatrix& cm, const LabelGrid& pred, const LabelGrid& gt,
                int ignore_label = kIgnoreLabel);

// Sums per-item matrices with a pairwise tree over `threads` workers.
ConfusionMatrix reduce_parallel(const std::vector<ConfusionMatrix>& parts, int threads);

using Metric = std::optional<double>;

struct MetricReport {
  Metric miou;       // over every class present in gt or prediction
  Metric miou_anom;  // defect classes only
  Metric f1_anom;    // collapsed foreground
  Metric f1_anom_per_class;
  Metric iou_bin;
  Metric recall_bin;
  Metric precision_bin;
  std::vector<Metric> per_class_iou;  // K+1 entries
  std::uint64_t pixels = 0;

  Metric get(const std::string& name) const;  // by field name
  std::string to_json(const std::vector<std::string>& class_names = {}, int indent = 2) const;
};

MetricReport compute_report(const ConfusionMatrix& cm);

struct ImageReport {
  std::string image_id;
  MetricReport report;
};

struct Evaluation {
  ConfusionMatrix cm;
  MetricReport report;
  std::vector<ImageReport> per_image;
};

// Reads <pred_dir>/<id>.png and <gt_dir>/<id>.png for every image of the
// split. Missing maps are an error naming the image.
Evaluation evaluate(const DatasetManifest& manifest, Split split,
                    const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir,
                    int ignore_label = kIgnoreLabel);

// Full evaluation document: global report, confusion matrix, per-image reports.
std::string evaluation_to_json(const Evaluation& ev, const std::vector<std::string>& class_names);

// Fixed-width table: mIoU, mIoU_anom, F1_anom, IoU_bin, Recall_bin, then
// per-class IoU.
std::string format_table(const MetricReport& r, const std::vector<std::string>& class_names);

std::string format_metric(const Metric& m, int precision = 4);

}  // namespace b2p
