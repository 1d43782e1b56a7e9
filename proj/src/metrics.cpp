#include "b2p/metrics.hpp"

#include <cstdio>
#include <future>
#include <sstream>

#include "b2p/error.hpp"
#include "json.hpp"

namespace b2p {

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t s = 0;
  for (auto v : counts_) s += v;
  return s;
}

std::uint64_t ConfusionMatrix::row_sum(int c) const {
  std::uint64_t s = 0;
  for (int j = 0; j < n_; ++j) s += at(c, j);
  return s;
}

std::uint64_t ConfusionMatrix::col_sum(int c) const {
  std::uint64_t s = 0;
  for (int i = 0; i < n_; ++i) s += at(i, c);
  return s;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& o) {
  if (o.n_ != n_) throw ValidationError("confusion matrices differ in size");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
  return *this;
}

ConfusionMatrix ConfusionMatrix::transposed() const {
  ConfusionMatrix t(n_);
  for (int i = 0; i < n_; ++i)
    for (int j = 0; j < n_; ++j) t.at(j, i) = at(i, j);
  return t;
}

void accumulate(ConfusionMatrix& cm, std::span<const std::uint8_t> pred,
                std::span<const std::uint8_t> gt, int ignore_label) {
  if (pred.size() != gt.size())
    throw ValidationError("accumulate: prediction has " + std::to_string(pred.size()) +
                          " pixels, ground truth " + std::to_string(gt.size()));
  const int n = cm.num_labels();
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == ignore_label) continue;
    if (gt[i] >= n || pred[i] >= n)
      throw ValidationError("accumulate: label out of range at pixel " + std::to_string(i) + " (gt " +
                            std::to_string(gt[i]) + ", pred " + std::to_string(pred[i]) + ")");
    ++cm.at(gt[i], pred[i]);
  }
}

void accumulate(ConfusionMatrix& cm, const LabelGrid& pred, const LabelGrid& gt, int ignore_label) {
  if (pred.width != gt.width || pred.height != gt.height)
    throw ValidationError("accumulate: prediction is " + std::to_string(pred.width) + "x" +
                          std::to_string(pred.height) + ", ground truth " + std::to_string(gt.width) +
                          "x" + std::to_string(gt.height));
  accumulate(cm, std::span<const std::uint8_t>(pred.values), std::span<const std::uint8_t>(gt.values),
             ignore_label);
}

ConfusionMatrix reduce_parallel(const std::vector<ConfusionMatrix>& parts, int threads) {
  if (parts.empty()) return ConfusionMatrix();
  std::vector<ConfusionMatrix> level = parts;
  threads = std::max(1, threads);
  while (level.size() > 1) {
    std::vector<ConfusionMatrix> next((level.size() + 1) / 2);
    std::vector<std::future<void>> jobs;
    for (std::size_t i = 0; i < next.size(); ++i) {
      auto work = [&, i] {
        next[i] = level[2 * i];
        if (2 * i + 1 < level.size()) next[i] += level[2 * i + 1];
      };
      if (static_cast<int>(jobs.size()) < threads - 1)
        jobs.push_back(std::async(std::launch::async, work));
      else
        work();
    }
    for (auto& j : jobs) j.get();
    level = std::move(next);
  }
  return level.front();
}

namespace {

Metric ratio(double num, double den) {
  if (den <= 0) return std::nullopt;
  return num / den;
}

Metric mean_of(const std::vector<Metric>& v, std::size_t from) {
  double s = 0;
  int n = 0;
  for (std::size_t i = from; i < v.size(); ++i)
    if (v[i]) {
      s += *v[i];
      ++n;
    }
  if (!n) return std::nullopt;
  return s / n;
}

nlohmann::json metric_json(const Metric& m) { return m ? nlohmann::json(*m) : nlohmann::json(nullptr); }

nlohmann::json report_json(const MetricReport& r, const std::vector<std::string>& names) {
  nlohmann::json j;
  j["miou"] = metric_json(r.miou);
  j["miou_anom"] = metric_json(r.miou_anom);
  j["f1_anom"] = metric_json(r.f1_anom);
  j["f1_anom_per_class"] = metric_json(r.f1_anom_per_class);
  j["iou_bin"] = metric_json(r.iou_bin);
  j["recall_bin"] = metric_json(r.recall_bin);
  j["precision_bin"] = metric_json(r.precision_bin);
  j["pixels"] = r.pixels;
  nlohmann::json per = nlohmann::json::object();
  for (std::size_t c = 0; c < r.per_class_iou.size(); ++c) {
    std::string key = c == 0 ? "background" : (c - 1 < names.size() ? names[c - 1] : "class_" + std::to_string(c));
    per[key] = metric_json(r.per_class_iou[c]);
  }
  j["per_class_iou"] = per;
  return j;
}

}  // namespace

MetricReport compute_report(const ConfusionMatrix& cm) {
  MetricReport r;
  const int n = cm.num_labels();
  r.pixels = cm.total();
  r.per_class_iou.assign(static_cast<std::size_t>(n), std::nullopt);
  if (r.pixels == 0) return r;
  std::vector<Metric> f1(static_cast<std::size_t>(n));
  for (int c = 0; c < n; ++c) {
    const double tp = static_cast<double>(cm.at(c, c));
    const double row = static_cast<double>(cm.row_sum(c)), col = static_cast<double>(cm.col_sum(c));
    r.per_class_iou[c] = ratio(tp, row + col - tp);
    f1[c] = ratio(2 * tp, row + col);
  }
  r.miou = mean_of(r.per_class_iou, 0);
  r.miou_anom = mean_of(r.per_class_iou, 1);
  r.f1_anom_per_class = mean_of(f1, 1);

  double tp = 0, fp = 0, fn = 0;
  for (int g = 0; g < n; ++g)
    for (int p = 0; p < n; ++p) {
      const double v = static_cast<double>(cm.at(g, p));
      if (g > 0 && p > 0) tp += v;
      else if (g == 0 && p > 0) fp += v;
      else if (g > 0 && p == 0) fn += v;
    }
  r.iou_bin = ratio(tp, tp + fp + fn);
  r.recall_bin = ratio(tp, tp + fn);
  r.precision_bin = ratio(tp, tp + fp);
  r.f1_anom = ratio(2 * tp, 2 * tp + fp + fn);
  return r;
}

Metric MetricReport::get(const std::string& name) const {
  if (name == "miou") return miou;
  if (name == "miou_anom") return miou_anom;
  if (name == "f1_anom") return f1_anom;
  if (name == "f1_anom_per_class") return f1_anom_per_class;
  if (name == "iou_bin") return iou_bin;
  if (name == "recall_bin") return recall_bin;
  if (name == "precision_bin") return precision_bin;
  throw ConfigError("unknown metric '" + name + "'");
}

std::string MetricReport::to_json(const std::vector<std::string>& class_names, int indent) const {
  return report_json(*this, class_names).dump(indent);
}

Evaluation evaluate(const DatasetManifest& manifest, Split split, const std::filesystem::path& pred_dir,
                    const std::filesystem::path& gt_dir, int ignore_label) {
  const int n = static_cast<int>(manifest.class_names.size()) + 1;
  Evaluation ev;
  ev.cm = ConfusionMatrix(n);
  for (const ImageRecord* rec : manifest.records_in(split)) {
    const auto pred_path = pred_dir / (rec->image_id + ".png");
    const auto gt_path = gt_dir / (rec->image_id + ".png");
    if (!std::filesystem::exists(pred_path))
      throw IoError("missing prediction for image '" + rec->image_id + "': " + pred_path.string());
    if (!std::filesystem::exists(gt_path))
      throw IoError("missing ground truth for image '" + rec->image_id + "': " + gt_path.string());
    const LabelGrid pred = read_label_png(pred_path);
    const LabelGrid gt = read_label_png(gt_path);
    ConfusionMatrix one(n);
    try {
      accumulate(one, pred, gt, ignore_label);
    } catch (const ValidationError& e) {
      throw ValidationError("image '" + rec->image_id + "': " + e.what());
    }
    ev.cm += one;
    ev.per_image.push_back({rec->image_id, compute_report(one)});
  }
  ev.report = compute_report(ev.cm);
  return ev;
}

std::string evaluation_to_json(const Evaluation& ev, const std::vector<std::string>& class_names) {
  nlohmann::json j;
  j["report"] = report_json(ev.report, class_names);
  nlohmann::json rows = nlohmann::json::array();
  for (int g = 0; g < ev.cm.num_labels(); ++g) {
    nlohmann::json row = nlohmann::json::array();
    for (int p = 0; p < ev.cm.num_labels(); ++p) row.push_back(ev.cm.at(g, p));
    rows.push_back(row);
  }
  j["confusion_matrix"] = rows;
  nlohmann::json per = nlohmann::json::array();
  for (const auto& im : ev.per_image) {
    auto e = report_json(im.report, class_names);
    e["image_id"] = im.image_id;
    per.push_back(e);
  }
  j["per_image"] = per;
  return j.dump(2);
}

std::string format_metric(const Metric& m, int precision) {
  if (!m) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", precision, *m);
  return buf;
}

std::string format_table(const MetricReport& r, const std::vector<std::string>& class_names) {
  std::vector<std::pair<std::string, Metric>> cols{{"mIoU", r.miou},
                                                  {"mIoU_anom", r.miou_anom},
                                                  {"F1_anom", r.f1_anom},
                                                  {"IoU_bin", r.iou_bin},
                                                  {"Recall_bin", r.recall_bin}};
  for (std::size_t c = 0; c < r.per_class_iou.size(); ++c) {
    const std::string name = c == 0 ? "background" : (c - 1 < class_names.size() ? class_names[c - 1] : "class_" + std::to_string(c));
    cols.emplace_back("IoU_" + name, r.per_class_iou[c]);
  }
  std::ostringstream head, vals;
  for (const auto& [name, m] : cols) {
    const int w = std::max<int>(static_cast<int>(name.size()), 8) + 2;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%*s", w, name.c_str());
    head << buf;
    std::snprintf(buf, sizeof buf, "%*s", w, format_metric(m).c_str());
    vals << buf;
  }
  return head.str() + "\n" + vals.str() + "\n";
}

}  // namespace b2p
