#include "b2p/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>

#include "b2p/error.hpp"
#include "b2p/teacher.hpp"
#include "b2p/util.hpp"
#include "json.hpp"

namespace b2p {

using nlohmann::json;

Prediction predict(Student& model, const RgbImage& image) {
  const int s = model.config().input_size;
  const Tensor x = preprocess(image, s);
  const StudentOutputs out = model.forward(x, false);
  const Tensor fine = nn::resize_bilinear(out.fine_logits, image.height, image.width);
  const Tensor bin = nn::resize_bilinear(out.binary_logits, image.height, image.width);
  const int ch = fine.dim(1);
  const std::size_t hw = static_cast<std::size_t>(image.width) * image.height;
  Prediction p;
  p.classes = LabelGrid(image.width, image.height);
  p.foreground = Grid<float>(image.width, image.height);
  for (std::size_t i = 0; i < hw; ++i) {
    int best = 0;
    float bv = fine[i];
    for (int c = 1; c < ch; ++c)
      if (fine[c * hw + i] > bv) {
        bv = fine[c * hw + i];
        best = c;
      }
    p.classes.values[i] = static_cast<std::uint8_t>(best);
    const double d = static_cast<double>(bin[hw + i]) - bin[i];
    p.foreground.values[i] = static_cast<float>(1.0 / (1.0 + std::exp(-d)));
  }
  return p;
}

Evaluation evaluate_model(Student& model, const DatasetManifest& manifest, Split split,
                          const LabelSource& labels) {
  const int n = manifest.num_classes() + 1;
  Evaluation ev;
  ev.cm = ConfusionMatrix(n);
  for (const ImageRecord* rec : manifest.records_in(split)) {
    const RgbImage img = read_image(manifest.resolve(rec->image_path));
    const Prediction p = predict(model, img);
    const LabelGrid target = labels(*rec);
    ConfusionMatrix one(n);
    try {
      accumulate(one, p.classes, target);
    } catch (const ValidationError& e) {
      throw ValidationError("image '" + rec->image_id + "': " + e.what());
    }
    ev.cm += one;
    ev.per_image.push_back({rec->image_id, compute_report(one)});
  }
  ev.report = compute_report(ev.cm);
  return ev;
}

void write_predictions(Student& model, const DatasetManifest& manifest, Split split,
                       const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  for (const ImageRecord* rec : manifest.records_in(split)) {
    const RgbImage img = read_image(manifest.resolve(rec->image_path));
    const Prediction p = predict(model, img);
    write_label_png(out_dir / (rec->image_id + ".png"), p.classes);
    Grid<std::uint8_t> prob(img.width, img.height);
    for (std::size_t i = 0; i < prob.values.size(); ++i)
      prob.values[i] = static_cast<std::uint8_t>(std::lround(std::clamp(p.foreground.values[i], 0.0f, 1.0f) * 255.0f));
    write_gray_png(out_dir / (rec->image_id + "_prob.png"), prob);
  }
}

namespace {

struct TrainItem {
  const ImageRecord* record;
  bool has_defect = false;
};

PseudoLabelMap load_pseudo(const PseudoLabelCache& cache, const ImageRecord& rec, int num_classes) {
  auto m = cache.load(rec.image_id);
  if (!m) throw IoError("pseudo-label cache has no entry for image '" + rec.image_id + "' in " + cache.dir().string());
  validate_label_map(*m, num_classes);
  return std::move(*m);
}

std::vector<std::vector<std::size_t>> make_batches(const std::vector<TrainItem>& items, int batch_size,
                                                   int min_defect, std::mt19937_64& rng) {
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  if (min_defect <= 0) {
    for (std::size_t i = 0; i < order.size(); i += batch_size)
      batches.emplace_back(order.begin() + i, order.begin() + std::min(order.size(), i + batch_size));
    return batches;
  }
  // Reserve min_defect slots per batch for defect images (reused cyclically
  // when there are too few), fill the rest from the shuffled pool.
  std::vector<std::size_t> defect;
  for (auto i : order)
    if (items[i].has_defect) defect.push_back(i);
  const std::size_t nb = (order.size() + batch_size - 1) / batch_size;
  std::vector<bool> used(items.size(), false);
  std::size_t dpos = 0, pos = 0;
  for (std::size_t b = 0; b < nb; ++b) {
    std::vector<std::size_t> batch;
    for (int k = 0; k < min_defect && !defect.empty(); ++k) {
      const std::size_t d = defect[dpos++ % defect.size()];
      if (std::find(batch.begin(), batch.end(), d) != batch.end()) break;
      batch.push_back(d);
      used[d] = true;
    }
    while (static_cast<int>(batch.size()) < batch_size && pos < order.size()) {
      const std::size_t i = order[pos++];
      if (used[i]) continue;
      batch.push_back(i);
      used[i] = true;
    }
    if (!batch.empty()) batches.push_back(std::move(batch));
  }
  return batches;
}

json metric_json(const Metric& m) { return m ? json(*m) : json(nullptr); }

json report_brief(const MetricReport& r) {
  return {{"miou", metric_json(r.miou)},
          {"miou_anom", metric_json(r.miou_anom)},
          {"f1_anom", metric_json(r.f1_anom)},
          {"iou_bin", metric_json(r.iou_bin)},
          {"recall_bin", metric_json(r.recall_bin)}};
}

bool all_finite(const Tensor& t) {
  for (float v : t.vec())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace

std::vector<double> resolve_class_weights(const TrainingConfig& cfg, const DatasetManifest& manifest) {
  if (!cfg.loss.class_weights.empty()) return cfg.loss.class_weights;
  const PseudoLabelCache cache(cfg.data.cache_root, teacher_fingerprint(cfg.teacher));
  std::vector<std::uint64_t> counts(static_cast<std::size_t>(manifest.num_classes()) + 1, 0);
  for (const ImageRecord* rec : manifest.records_in(Split::kTrain)) {
    const auto m = load_pseudo(cache, *rec, manifest.num_classes());
    for (auto v : m.values) ++counts[v];
  }
  return inverse_frequency_weights(counts);
}

FitResult fit(const TrainingConfig& cfg, const DatasetManifest& manifest,
              const std::filesystem::path& run_dir, const FitOptions& options) {
  cfg.validate();
  if (manifest.num_classes() != cfg.model.num_classes)
    throw ConfigError("model.num_classes is " + std::to_string(cfg.model.num_classes) + " but the manifest has " +
                      std::to_string(manifest.num_classes()) + " classes");
  if (cfg.model.backbone.kind == nn::BackboneKind::kPretrainedVitS14 && cfg.model.backbone.weights.empty())
    throw ConfigError("model.backbone.weights must name a local checkpoint for the pretrained backbone");

  const int K = cfg.model.num_classes;
  const int S = cfg.model.input_size;
  const std::string fingerprint = teacher_fingerprint(cfg.teacher);
  const PseudoLabelCache cache(cfg.data.cache_root, fingerprint);

  std::vector<TrainItem> items;
  std::vector<std::uint64_t> counts(static_cast<std::size_t>(K) + 1, 0);
  for (const ImageRecord* rec : manifest.records_in(Split::kTrain)) {
    const auto m = load_pseudo(cache, *rec, K);
    TrainItem it{rec, false};
    for (auto v : m.values) {
      ++counts[v];
      if (v) it.has_defect = true;
    }
    items.push_back(it);
  }
  if (items.empty()) throw ValidationError("manifest has no training images");
  for (const ImageRecord* rec : manifest.records_in(Split::kVal))
    if (!cache.contains(rec->image_id))
      throw IoError("pseudo-label cache has no entry for image '" + rec->image_id + "' in " + cache.dir().string());

  FitResult result;
  result.class_weights = cfg.loss.class_weights.empty() ? inverse_frequency_weights(counts) : cfg.loss.class_weights;

  std::filesystem::create_directories(run_dir);
  {
    std::ofstream snap(run_dir / "config.json");
    snap << config_to_json(cfg) << "\n";
  }
  std::ofstream log(run_dir / "train_log.jsonl", std::ios::trunc);
  auto write_log = [&](const json& j) {
    log << j.dump() << "\n";
    log.flush();
  };

  Student model(cfg.model);
  const nn::ParamRefs& state = model.state();
  const nn::ParamRefs params = model.trainable_parameters();
  AdamW opt(params);
  EmaState ema(state, cfg.ema_decay, cfg.ema_warmup);

  std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, "shuffle"));
  std::mt19937_64 aug_rng(mix_seed(cfg.seed, "augment"));
  const int B = cfg.batch_size;
  const long steps_per_epoch = (static_cast<long>(items.size()) + B - 1) / B;
  const long total_steps = steps_per_epoch * cfg.epochs;
  const long warmup = cfg.loss.warmup_steps.value_or(steps_per_epoch);
  const std::string chash = config_hash(cfg);
  result.best_checkpoint = run_dir / "ckpt_best.safetensors";
  result.last_checkpoint = run_dir / "ckpt_last.safetensors";
  result.correction.corrected_per_class.assign(static_cast<std::size_t>(K), 0);

  write_log({{"type", "start"},
             {"images", items.size()},
             {"steps_per_epoch", steps_per_epoch},
             {"total_steps", total_steps},
             {"warmup_steps", warmup},
             {"class_weights", result.class_weights},
             {"teacher_fingerprint", fingerprint},
             {"trainable_parameters", model.parameter_report().trainable},
             {"total_parameters", model.parameter_report().total}});

  const LabelSource val_labels = [&](const ImageRecord& rec) { return load_pseudo(cache, rec, K); };
  double best_score = -std::numeric_limits<double>::infinity();
  long step = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    CorrectionStats epoch_stats;
    epoch_stats.corrected_per_class.assign(static_cast<std::size_t>(K), 0);
    const auto batches = make_batches(items, B, cfg.min_defect_images_per_batch, shuffle_rng);
    for (const auto& batch : batches) {
      const int n = static_cast<int>(batch.size());
      Tensor x({n, 3, S, S});
      std::vector<std::uint8_t> labels(static_cast<std::size_t>(n) * S * S);
      std::vector<std::string> ids;
      for (int b = 0; b < n; ++b) {
        const ImageRecord& rec = *items[batch[b]].record;
        ids.push_back(rec.image_id);
        RgbImage img = read_image(manifest.resolve(rec.image_path));
        PseudoLabelMap lab = load_pseudo(cache, rec, K);
        if (lab.width != img.width || lab.height != img.height)
          throw ValidationError("pseudo-label for image '" + rec.image_id + "' is " + std::to_string(lab.width) +
                                "x" + std::to_string(lab.height) + ", image is " + std::to_string(img.width) + "x" +
                                std::to_string(img.height));
        const bool flip = cfg.augment_hflip && std::bernoulli_distribution(0.5)(aug_rng);
        if (flip) {
          img = flip_horizontal(img);
          lab = flip_horizontal(lab);
        }
        preprocess_into(img, S, x, b);
        const LabelGrid small = resize_nearest(lab, S, S);
        std::copy(small.values.begin(), small.values.end(), labels.begin() + static_cast<std::ptrdiff_t>(b) * S * S);
      }

      const StudentOutputs out = model.forward(x, true);
      const bool warm = step < warmup;
      LossTerms terms;
      terms.total = terms.bin = terms.fine = std::numeric_limits<double>::quiet_NaN();
      const double lr = cfg.schedule.kind == "cosine"
                            ? cosine_lr(step, total_steps, cfg.lr, cfg.schedule.min_lr_factor)
                            : cfg.lr;

      auto abort = [&](const std::string& why) {
        json dump = {{"reason", why},
                     {"step", step},
                     {"epoch", epoch},
                     {"lr", lr},
                     {"images", ids},
                     {"loss_total", std::isfinite(terms.total) ? json(terms.total) : json(nullptr)},
                     {"loss_bin", std::isfinite(terms.bin) ? json(terms.bin) : json(nullptr)},
                     {"loss_fine", std::isfinite(terms.fine) ? json(terms.fine) : json(nullptr)},
                     {"binary_logits_finite", all_finite(out.binary_logits)},
                     {"fine_logits_finite", all_finite(out.fine_logits)}};
        json bad = json::array();
        for (const auto* p : state)
          if (!all_finite(p->value)) bad.push_back(p->name);
        dump["non_finite_parameters"] = bad;
        std::ofstream(run_dir / "abort_dump.json") << dump.dump(2) << "\n";
        write_log({{"type", "abort"}, {"step", step}, {"reason", why}});
        throw TrainingAbort(why + " at step " + std::to_string(step) + " (diagnostics in " +
                            (run_dir / "abort_dump.json").string() + ")");
      };
      if (!all_finite(out.binary_logits) || !all_finite(out.fine_logits)) abort("non-finite logits");
      terms = total_loss(out.binary_logits, out.fine_logits, labels, cfg.loss, result.class_weights, warm);
      if (!std::isfinite(terms.total)) abort("non-finite loss");

      model.zero_grad();
      model.backward(terms.d_binary, terms.d_fine);
      ClipResult clip;
      try {
        clip = clip_gradients(params, cfg.clip_norm);
      } catch (const Error& e) {
        abort(e.what());
      }
      opt.step(lr, cfg.weight_decay);
      ema.update(state);
      ++step;

      StepRecord rec{step, epoch, lr, terms.total, terms.bin, terms.fine, clip.norm,
                     terms.stats.pixels_corrected, terms.stats.pixels_eligible};
      epoch_stats.merge(terms.stats);
      result.steps.push_back(rec);
      write_log({{"type", "step"},
                 {"step", rec.step},
                 {"epoch", rec.epoch},
                 {"lr", rec.lr},
                 {"loss_total", rec.loss_total},
                 {"loss_bin", rec.loss_bin},
                 {"loss_fine", rec.loss_fine},
                 {"grad_norm", rec.grad_norm},
                 {"pixels_corrected", rec.pixels_corrected},
                 {"pixels_eligible", rec.pixels_eligible},
                 {"warmup", warm}});
      if (options.on_step) options.on_step(rec, model);
    }

    // Validation and selection use the EMA weights.
    ema.swap_with(state);
    EpochRecord er;
    er.epoch = epoch;
    er.step = step;
    er.correction = epoch_stats;
    er.val = evaluate_model(model, manifest, Split::kVal, val_labels).report;
    ema.swap_with(state);
    result.correction.merge(epoch_stats);

    const Metric metric = er.val.get(cfg.selection_metric);
    const double score = metric.value_or(-1.0);
    CheckpointMeta meta{step, epoch, cfg.selection_metric, metric, chash, fingerprint};
    if (score > best_score) {
      best_score = score;
      result.best_metric = metric;
      result.best_epoch = epoch;
      er.selected = true;
      save_checkpoint(result.best_checkpoint, cfg, meta, model, &ema);
    }
    save_checkpoint(result.last_checkpoint, cfg, meta, model, &ema);
    result.epochs.push_back(er);
    write_log({{"type", "epoch"},
               {"epoch", epoch},
               {"step", step},
               {"val_metrics", report_brief(er.val)},
               {"selection_metric", cfg.selection_metric},
               {"selected", er.selected},
               {"pixels_corrected", epoch_stats.pixels_corrected},
               {"pixels_eligible", epoch_stats.pixels_eligible},
               {"corrected_per_class", epoch_stats.corrected_per_class}});
    if (!options.quiet)
      std::cerr << "epoch " << epoch << "/" << cfg.epochs << "  loss " << result.steps.back().loss_total << "  val "
                << cfg.selection_metric << " " << format_metric(metric) << (er.selected ? "  *" : "") << "\n";
  }
  write_log({{"type", "end"},
             {"best_epoch", result.best_epoch},
             {"best_metric", metric_json(result.best_metric)},
             {"pixels_corrected", result.correction.pixels_corrected},
             {"pixels_eligible", result.correction.pixels_eligible}});
  return result;
}

}  // namespace b2p
