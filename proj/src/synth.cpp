#include "b2p/synth.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "b2p/error.hpp"
#include "b2p/pseudo_labels.hpp"
#include "b2p/util.hpp"
#include "json.hpp"

namespace b2p {

namespace {

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

// Smooth value noise: a coarse random lattice sampled bilinearly.
std::vector<double> value_noise(int size, int cells, Rng& rng) {
  std::vector<double> lattice(static_cast<std::size_t>(cells + 1) * (cells + 1));
  for (auto& v : lattice) v = uniform(rng, -1.0, 1.0);
  std::vector<double> out(static_cast<std::size_t>(size) * size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double fx = static_cast<double>(x) / size * cells, fy = static_cast<double>(y) / size * cells;
      const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
      const double tx = fx - x0, ty = fy - y0;
      auto L = [&](int i, int j) { return lattice[static_cast<std::size_t>(j) * (cells + 1) + i]; };
      out[static_cast<std::size_t>(y) * size + x] =
          (1 - ty) * ((1 - tx) * L(x0, y0) + tx * L(x0 + 1, y0)) + ty * ((1 - tx) * L(x0, y0 + 1) + tx * L(x0 + 1, y0 + 1));
    }
  return out;
}

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax, dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double qx = ax + t * dx - px, qy = ay + t * dy - py;
  return std::sqrt(qx * qx + qy * qy);
}

// A shape in local coordinates: coverage mask plus per-pixel blend alpha for
// rendering (alpha may extend past the mask for soft edges).
struct Shape {
  int w = 0, h = 0;
  std::vector<std::uint8_t> mask;
  std::vector<double> alpha;
};

Shape make_stroke(Rng& rng, int image_size) {
  const double scale = image_size / 128.0;
  const int segments = uniform_int(rng, 2, 4);
  const double width = uniform(rng, 1.0, 3.0);
  std::vector<std::pair<double, double>> pts{{0.0, 0.0}};
  double angle = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  for (int s = 0; s < segments; ++s) {
    const double len = uniform(rng, 12.0, 28.0) * scale;
    angle += uniform(rng, -0.8, 0.8);
    pts.emplace_back(pts.back().first + len * std::cos(angle), pts.back().second + len * std::sin(angle));
  }
  double minx = 1e9, miny = 1e9, maxx = -1e9, maxy = -1e9;
  for (auto [x, y] : pts) {
    minx = std::min(minx, x);
    miny = std::min(miny, y);
    maxx = std::max(maxx, x);
    maxy = std::max(maxy, y);
  }
  const double pad = width / 2.0 + 1.0;
  Shape s;
  s.w = static_cast<int>(std::ceil(maxx - minx + 2 * pad)) + 1;
  s.h = static_cast<int>(std::ceil(maxy - miny + 2 * pad)) + 1;
  s.mask.assign(static_cast<std::size_t>(s.w) * s.h, 0);
  s.alpha.assign(s.mask.size(), 0.0);
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) {
      const double px = x + 0.5 + minx - pad, py = y + 0.5 + miny - pad;
      double d = 1e9;
      for (std::size_t i = 0; i + 1 < pts.size(); ++i)
        d = std::min(d, segment_distance(px, py, pts[i].first, pts[i].second, pts[i + 1].first, pts[i + 1].second));
      const std::size_t k = static_cast<std::size_t>(y) * s.w + x;
      if (d <= width / 2.0) {
        s.mask[k] = 1;
        s.alpha[k] = 1.0;
      }
    }
  return s;
}

Shape make_blob(Rng& rng, int image_size) {
  const double scale = image_size / 128.0;
  const double a = uniform(rng, 6.0, 14.0) * scale;
  const double b = uniform(rng, 4.0, a);
  const double th = uniform(rng, 0.0, std::numbers::pi);
  const double ext = a + 1.0;
  Shape s;
  s.w = s.h = static_cast<int>(std::ceil(2 * ext)) + 1;
  s.mask.assign(static_cast<std::size_t>(s.w) * s.h, 0);
  s.alpha.assign(s.mask.size(), 0.0);
  const double c = s.w / 2.0;
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) {
      const double dx = x + 0.5 - c, dy = y + 0.5 - c;
      const double u = (dx * std::cos(th) + dy * std::sin(th)) / a;
      const double v = (-dx * std::sin(th) + dy * std::cos(th)) / b;
      const double r = std::sqrt(u * u + v * v);
      const std::size_t k = static_cast<std::size_t>(y) * s.w + x;
      // Softer rim, cut at the labelled boundary so every tinted pixel is
      // part of the ground truth.
      if (r <= 1.0) {
        s.mask[k] = 1;
        s.alpha[k] = std::clamp((1.0 - r) / 0.4 + 0.35, 0.0, 1.0);
      }
    }
  return s;
}

// Tight hull of the mask pixels in local coordinates.
PixelBox mask_hull(const Shape& s) {
  PixelBox b{s.w, s.h, 0, 0};
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x)
      if (s.mask[static_cast<std::size_t>(y) * s.w + x]) {
        b.x0 = std::min(b.x0, x);
        b.y0 = std::min(b.y0, y);
        b.x1 = std::max(b.x1, x + 1);
        b.y1 = std::max(b.y1, y + 1);
      }
  return b;
}

bool overlaps_with_margin(const PixelBox& a, const PixelBox& b, int margin) {
  return a.x0 < b.x1 + margin && b.x0 < a.x1 + margin && a.y0 < b.y1 + margin && b.y0 < a.y1 + margin;
}

}  // namespace

TrainingConfig bench_config() {
  TrainingConfig cfg;
  cfg.model = ModelConfig::desk_scale(128);
  cfg.model.num_classes = static_cast<int>(kSyntheticClasses.size());
  cfg.teacher.kind = TeacherKind::kSyntheticNoisy;
  cfg.ema_warmup = true;
  cfg.epochs = 12;
  cfg.batch_size = 8;
  cfg.lr = 2e-3;
  return cfg;
}

SyntheticSample generate_scene(const SceneConfig& cfg, Rng& rng) {
  cfg.validate();
  const int S = cfg.image_size;
  SyntheticSample s;
  s.image = RgbImage(S, S);
  s.gt = LabelGrid(S, S, 0);

  // Background: base tone, illumination ramp, smooth texture, grain.
  const double base = uniform(rng, 115.0, 165.0);
  const double tint[3] = {uniform(rng, -8, 8), uniform(rng, -8, 8), uniform(rng, -8, 8)};
  const double ramp_angle = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double ramp = uniform(rng, 0.3, 1.0) * cfg.gradient_strength;
  const auto coarse = value_noise(S, 4, rng);
  const auto fine = value_noise(S, 16, rng);
  std::normal_distribution<double> grain(0.0, cfg.noise_scale / 3.0);
  std::vector<double> img(static_cast<std::size_t>(S) * S * 3);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const std::size_t k = static_cast<std::size_t>(y) * S + x;
      const double t = (x * std::cos(ramp_angle) + y * std::sin(ramp_angle)) / S;
      const double lum = base + ramp * (t - 0.5) + cfg.noise_scale * (0.7 * coarse[k] + 0.5 * fine[k]);
      for (int c = 0; c < 3; ++c) img[k * 3 + c] = lum + tint[c];
    }

  const bool has_defects = uniform(rng, 0.0, 1.0) < cfg.defect_image_fraction;
  const int count = has_defects ? uniform_int(rng, 1, cfg.max_defects_per_image) : 0;
  std::vector<PixelBox> taken;
  for (int i = 0; i < count; ++i) {
    const int cls = uniform(rng, 0.0, 1.0) < 0.5 ? kDamageClass : kDirtClass;
    const Shape shape = cls == kDamageClass ? make_stroke(rng, S) : make_blob(rng, S);
    const PixelBox hull = mask_hull(shape);
    if (hull.x1 <= hull.x0) continue;
    const double strength = uniform(rng, 0.8, 1.2);
    for (int attempt = 0; attempt < 50; ++attempt) {
      // Offset such that the mask hull lies inside the image.
      const int ox = uniform_int(rng, -hull.x0, S - hull.x1);
      const int oy = uniform_int(rng, -hull.y0, S - hull.y1);
      const PixelBox placed{hull.x0 + ox, hull.y0 + oy, hull.x1 + ox, hull.y1 + oy};
      if (std::any_of(taken.begin(), taken.end(),
                      [&](const PixelBox& t) { return overlaps_with_margin(placed, t, 1); }))
        continue;
      for (int y = 0; y < shape.h; ++y)
        for (int x = 0; x < shape.w; ++x) {
          const int gx = x + ox, gy = y + oy;
          if (gx < 0 || gy < 0 || gx >= S || gy >= S) continue;
          const std::size_t lk = static_cast<std::size_t>(y) * shape.w + x;
          const double a = shape.alpha[lk];
          const std::size_t k = static_cast<std::size_t>(gy) * S + gx;
          if (a > 0) {
            if (cls == kDamageClass) {
              for (int c = 0; c < 3; ++c) img[k * 3 + c] -= a * strength * cfg.damage_contrast;
            } else {
              const double shift[3] = {0.35, -0.1, -0.6};
              for (int c = 0; c < 3; ++c) img[k * 3 + c] += a * strength * cfg.dirt_contrast * shift[c];
            }
          }
          if (shape.mask[lk]) s.gt(gx, gy) = static_cast<std::uint8_t>(cls + 1);
        }
      taken.push_back(placed);
      s.components.push_back({cls, placed});
      s.boxes.push_back(pixels_to_box(placed, cls, S, S));
      break;
    }
  }

  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const std::size_t k = static_cast<std::size_t>(y) * S + x;
      const double g = grain(rng);
      for (int c = 0; c < 3; ++c)
        s.image.at(x, y)[c] = static_cast<std::uint8_t>(std::clamp(std::lround(img[k * 3 + c] + g), 0L, 255L));
    }
  return s;
}

SyntheticSample generate_scene(const SceneConfig& cfg, const std::string& image_id) {
  Rng rng(mix_seed(mix_seed(cfg.seed, "scene"), image_id));
  return generate_scene(cfg, rng);
}

void corrupt_teacher(SyntheticSample& sample, const NoiseProfile& noise, std::uint64_t seed,
                     const std::string& image_id, OverlapPolicy policy) {
  noise.validate();
  Rng omit_rng(mix_seed(mix_seed(seed, "omit"), image_id));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  sample.kept_boxes.clear();
  std::vector<BoxAnnotation> kept;
  for (std::size_t i = 0; i < sample.boxes.size(); ++i)
    if (unit(omit_rng) >= noise.box_omission_rate) {
      sample.kept_boxes.push_back(static_cast<int>(i));
      kept.push_back(sample.boxes[i]);
    }
  const LabelGrid gt = sample.gt;
  NoisyGroundTruthTeacher teacher([gt](const std::string&) { return gt; }, noise, seed);
  TeacherInput input;
  input.image_id = image_id;
  input.image = &sample.image;
  input.num_boxes = static_cast<int>(kept.size());
  sample.teacher_masks = teacher_masks_for_image(teacher, input, kept, true, 0);
  sample.pseudo = rasterize(sample.teacher_masks, sample.image.width, sample.image.height, policy);
}

SyntheticDataset emit_dataset(const TrainingConfig& cfg_in, const std::filesystem::path& out_dir) {
  TrainingConfig cfg = cfg_in;
  cfg.synth.scene.validate();
  cfg.teacher.noise.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "images");
  fs::create_directories(out_dir / "labels");
  fs::create_directories(out_dir / "gt");
  SyntheticDataset ds;
  ds.root = fs::absolute(out_dir);
  ds.manifest_path = ds.root / "manifest.json";
  ds.gt_dir = ds.root / "gt";

  DatasetManifest m;
  m.class_names = kSyntheticClasses;
  m.root = ds.root;
  const std::pair<Split, int> splits[] = {{Split::kTrain, cfg.synth.train_images},
                                          {Split::kVal, cfg.synth.val_images},
                                          {Split::kTest, cfg.synth.test_images}};
  for (const auto& [split, count] : splits) {
    for (int i = 0; i < count; ++i) {
      char id[64];
      std::snprintf(id, sizeof id, "%s_%04d", std::string(split_name(split)).c_str(), i);
      SyntheticSample s = generate_scene(cfg.synth.scene, id);
      // Omission is an annotation property; the teacher only sees kept boxes.
      corrupt_teacher(s, cfg.teacher.noise, cfg.teacher.seed, id, cfg.teacher.overlap_policy);
      ImageRecord rec;
      rec.image_id = id;
      rec.image_path = fs::path("images") / (std::string(id) + ".png");
      rec.annotation_path = fs::path("labels") / (std::string(id) + ".txt");
      rec.width = s.image.width;
      rec.height = s.image.height;
      for (int k : s.kept_boxes) rec.boxes.push_back(s.boxes[static_cast<std::size_t>(k)]);
      write_rgb_png(ds.root / rec.image_path, s.image);
      write_label_png(ds.gt_dir / (std::string(id) + ".png"), s.gt);
      m.split_of[id] = split;
      m.records.push_back(std::move(rec));
    }
  }
  save_manifest(m, ds.manifest_path);

  cfg.teacher.kind = TeacherKind::kSyntheticNoisy;
  cfg.teacher.gt_root = ds.gt_dir.string();
  cfg.teacher.clip_to_box = true;
  cfg.data.manifest = ds.manifest_path.string();
  cfg.data.cache_root = (ds.root / "cache").string();
  cfg.model.num_classes = static_cast<int>(kSyntheticClasses.size());
  if (cfg.model.input_size != cfg.synth.scene.image_size) cfg.model.input_size = cfg.synth.scene.image_size;

  const auto teacher = make_teacher(cfg.teacher);
  ManifestLoad loaded = load_manifest(ds.manifest_path);
  // Scenes are regenerated on every emission, so stale cache entries are overwritten.
  PseudoLabelOptions opts;
  opts.reuse_cache = false;
  ds.pseudo_labels = build_pseudo_labels(loaded.manifest, *teacher, cfg.teacher, cfg.data.cache_root, opts);
  if (!ds.pseudo_labels.failures.empty())
    throw Error("synthetic pseudo-labelling failed for image '" + ds.pseudo_labels.failures.front().image_id +
                "': " + ds.pseudo_labels.failures.front().error);
  std::ofstream(ds.root / "config.json") << config_to_json(cfg) << "\n";
  ds.config = cfg;
  return ds;
}

AblationRun run_ablation(const SyntheticDataset& dataset, bool with_correction,
                         const std::filesystem::path& run_dir, const FitOptions& options) {
  TrainingConfig cfg = dataset.config;
  cfg.loss.self_correction = with_correction;
  const DatasetManifest manifest = load_manifest(dataset.manifest_path).manifest;
  AblationRun run;
  run.fit = fit(cfg, manifest, run_dir, options);
  run.correction = run.fit.correction;
  // Final EMA weights: selecting on noisy validation pseudo-labels would
  // favour whichever arm agrees more with the teacher's omissions.
  const Checkpoint ck = load_checkpoint(run.fit.last_checkpoint);
  auto model = student_from_checkpoint(ck, true);
  const std::filesystem::path gt_dir = dataset.gt_dir;
  const Evaluation ev = evaluate_model(*model, manifest, Split::kTest, [&](const ImageRecord& rec) {
    return read_label_png(gt_dir / (rec.image_id + ".png"));
  });
  run.test = ev.report;
  std::ofstream(run_dir / "test_report.json") << evaluation_to_json(ev, manifest.class_names) << "\n";
  return run;
}

Metric AblationRow::recall_delta() const {
  if (!on.test.recall_bin || !off.test.recall_bin) return std::nullopt;
  return *on.test.recall_bin - *off.test.recall_bin;
}

Metric AblationRow::miou_anom_delta() const {
  if (!on.test.miou_anom || !off.test.miou_anom) return std::nullopt;
  return *on.test.miou_anom - *off.test.miou_anom;
}

double AblationRow::corrected_fraction_on() const {
  return on.correction.pixels_eligible
             ? static_cast<double>(on.correction.pixels_corrected) / static_cast<double>(on.correction.pixels_eligible)
             : 0.0;
}

namespace {

Metric mean_metric(const std::vector<AblationRow>& rows, Metric (AblationRow::*f)() const) {
  double s = 0;
  int n = 0;
  for (const auto& r : rows)
    if (auto v = (r.*f)()) {
      s += *v;
      ++n;
    }
  if (!n) return std::nullopt;
  return s / n;
}

nlohmann::json mj(const Metric& m) { return m ? nlohmann::json(*m) : nlohmann::json(nullptr); }

nlohmann::json run_json(const AblationRun& r) {
  return {{"miou", mj(r.test.miou)},
          {"miou_anom", mj(r.test.miou_anom)},
          {"f1_anom", mj(r.test.f1_anom)},
          {"iou_bin", mj(r.test.iou_bin)},
          {"recall_bin", mj(r.test.recall_bin)},
          {"precision_bin", mj(r.test.precision_bin)},
          {"pixels_corrected", r.correction.pixels_corrected},
          {"pixels_eligible", r.correction.pixels_eligible},
          {"best_epoch", r.fit.best_epoch}};
}

}  // namespace

Metric BenchReport::mean_recall_delta() const { return mean_metric(rows, &AblationRow::recall_delta); }
Metric BenchReport::mean_miou_anom_delta() const { return mean_metric(rows, &AblationRow::miou_anom_delta); }

std::string BenchReport::to_json() const {
  nlohmann::json j;
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows)
    arr.push_back({{"seed", r.seed},
                   {"without_correction", run_json(r.off)},
                   {"with_correction", run_json(r.on)},
                   {"recall_delta", mj(r.recall_delta())},
                   {"miou_anom_delta", mj(r.miou_anom_delta())},
                   {"corrected_fraction", r.corrected_fraction_on()}});
  j["rows"] = arr;
  j["mean_recall_delta"] = mj(mean_recall_delta());
  j["mean_miou_anom_delta"] = mj(mean_miou_anom_delta());
  return j.dump(2);
}

std::string BenchReport::to_table() const {
  std::ostringstream o;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%6s %12s %12s %10s %12s %12s %10s %10s\n", "seed", "recall_off", "recall_on",
                "d_recall", "mIoUa_off", "mIoUa_on", "d_mIoUa", "corr_frac");
  o << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%6llu %12s %12s %10s %12s %12s %10s %10.4f\n",
                  static_cast<unsigned long long>(r.seed), format_metric(r.off.test.recall_bin).c_str(),
                  format_metric(r.on.test.recall_bin).c_str(), format_metric(r.recall_delta()).c_str(),
                  format_metric(r.off.test.miou_anom).c_str(), format_metric(r.on.test.miou_anom).c_str(),
                  format_metric(r.miou_anom_delta()).c_str(), r.corrected_fraction_on());
    o << buf;
  }
  std::snprintf(buf, sizeof buf, "%6s %12s %12s %10s %12s %12s %10s\n", "mean", "", "",
                format_metric(mean_recall_delta()).c_str(), "", "", format_metric(mean_miou_anom_delta()).c_str());
  o << buf;
  return o.str();
}

BenchReport run_bench(const TrainingConfig& cfg, int seeds, const std::filesystem::path& out_dir,
                      const FitOptions& options) {
  if (seeds < 1) throw ConfigError("--seeds must be >= 1");
  BenchReport report;
  for (int k = 0; k < seeds; ++k) {
    TrainingConfig c = cfg;
    const std::uint64_t seed = cfg.seed + static_cast<std::uint64_t>(k);
    c.seed = seed;
    c.synth.scene.seed = cfg.synth.scene.seed + static_cast<std::uint64_t>(k);
    c.teacher.seed = cfg.teacher.seed + static_cast<std::uint64_t>(k);
    const auto dir = out_dir / ("seed_" + std::to_string(seed));
    const SyntheticDataset ds = emit_dataset(c, dir / "data");
    AblationRow row;
    row.seed = seed;
    row.off = run_ablation(ds, false, dir / "without_correction", options);
    row.on = run_ablation(ds, true, dir / "with_correction", options);
    report.rows.push_back(std::move(row));
  }
  return report;
}

}  // namespace b2p
