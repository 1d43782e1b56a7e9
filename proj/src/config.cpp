#include "b2p/config.hpp"

#include <fstream>
#include <sstream>

#include "b2p/error.hpp"
#include "b2p/util.hpp"
#include "json.hpp"

namespace b2p {

using nlohmann::json;

void SceneConfig::validate() const {
  if (image_size < 32) throw ConfigError("synth.scene.image_size must be >= 32");
  if (!(defect_image_fraction >= 0 && defect_image_fraction <= 1))
    throw ConfigError("synth.scene.defect_image_fraction must lie in [0,1]");
  if (max_defects_per_image < 1) throw ConfigError("synth.scene.max_defects_per_image must be >= 1");
  if (noise_scale < 0 || gradient_strength < 0) throw ConfigError("synth texture parameters must be >= 0");
}

void TrainingConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("lr must be positive");
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be nonnegative");
  if (!(clip_norm > 0)) throw ConfigError("clip_norm must be positive");
  if (!(ema_decay > 0 && ema_decay < 1)) throw ConfigError("ema_decay must lie in (0,1)");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (schedule.kind != "cosine" && schedule.kind != "constant")
    throw ConfigError("schedule.kind must be 'cosine' or 'constant'");
  if (!(schedule.min_lr_factor >= 0 && schedule.min_lr_factor <= 1))
    throw ConfigError("schedule.min_lr_factor must lie in [0,1]");
  static const std::vector<std::string> metrics{"miou_anom", "miou", "iou_bin", "f1_anom", "recall_bin"};
  if (std::find(metrics.begin(), metrics.end(), selection_metric) == metrics.end())
    throw ConfigError("unknown selection_metric '" + selection_metric + "'");
  if (min_defect_images_per_batch < 0 || min_defect_images_per_batch > batch_size)
    throw ConfigError("min_defect_images_per_batch must lie in [0, batch_size]");
  loss.validate(model.num_classes);
  model.validate();
  teacher.validate();
  synth.scene.validate();
  if (synth.train_images < 1 || synth.val_images < 1 || synth.test_images < 1)
    throw ConfigError("synth split sizes must be >= 1");
}

namespace {

json to_j(const TrainingConfig& c) {
  const auto& m = c.model;
  const auto& bb = m.backbone;
  const auto& t = c.teacher;
  const auto& l = c.loss;
  const auto& sc = c.synth.scene;
  json j;
  j["seed"] = c.seed;
  j["lr"] = c.lr;
  j["weight_decay"] = c.weight_decay;
  j["clip_norm"] = c.clip_norm;
  j["ema_decay"] = c.ema_decay;
  j["ema_warmup"] = c.ema_warmup;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["schedule"] = {{"kind", c.schedule.kind}, {"min_lr_factor", c.schedule.min_lr_factor}};
  j["selection_metric"] = c.selection_metric;
  j["augment_hflip"] = c.augment_hflip;
  j["min_defect_images_per_batch"] = c.min_defect_images_per_batch;
  j["loss"] = {{"beta", l.beta},
               {"epsilon", l.epsilon},
               {"tau", l.tau},
               {"class_weights", l.class_weights.empty() ? json("auto") : json(l.class_weights)},
               {"lambda_bin", l.lambda_bin},
               {"lambda_fine", l.lambda_fine},
               {"warmup_steps", l.warmup_steps ? json(*l.warmup_steps) : json(nullptr)},
               {"self_correction", l.self_correction},
               {"dice_per_image", l.dice_per_image}};
  j["model"] = {{"decoder_channels", m.decoder_channels},
                {"detail_channels", m.detail_channels},
                {"head_channels", m.head_channels},
                {"num_classes", m.num_classes},
                {"input_size", m.input_size},
                {"norm", m.norm == nn::NormKind::kBatch ? "batch" : "group"},
                {"bitfit", m.bitfit},
                {"init_seed", m.init_seed},
                {"backbone",
                 {{"kind", nn::backbone_kind_name(bb.kind)},
                  {"tap_layers", bb.tap_layers},
                  {"patch_size", bb.patch_size},
                  {"embed_dim", bb.embed_dim},
                  {"depth", bb.depth},
                  {"num_heads", bb.num_heads},
                  {"mlp_ratio", bb.mlp_ratio},
                  {"layer_scale_init", bb.layer_scale_init},
                  {"weights", bb.weights}}}};
  j["teacher"] = {{"kind", std::string(teacher_kind_name(t.kind))},
                  {"clip_to_box", t.clip_to_box},
                  {"overlap_policy", std::string(overlap_policy_name(t.overlap_policy))},
                  {"model_id", t.model_id},
                  {"endpoint", t.endpoint},
                  {"command", t.command},
                  {"gt_root", t.gt_root},
                  {"noise",
                   {{"fn_component_drop_rate", t.noise.fn_component_drop_rate},
                    {"fn_erode_radius", t.noise.fn_erode_radius},
                    {"fp_blob_rate", t.noise.fp_blob_rate},
                    {"box_omission_rate", t.noise.box_omission_rate}}},
                  {"seed", t.seed},
                  {"max_retries", t.max_retries},
                  {"timeout_seconds", t.timeout_seconds}};
  j["data"] = {{"manifest", c.data.manifest}, {"cache_root", c.data.cache_root}};
  j["synth"] = {{"scene",
                 {{"image_size", sc.image_size},
                  {"noise_scale", sc.noise_scale},
                  {"gradient_strength", sc.gradient_strength},
                  {"defect_image_fraction", sc.defect_image_fraction},
                  {"max_defects_per_image", sc.max_defects_per_image},
                  {"damage_contrast", sc.damage_contrast},
                  {"dirt_contrast", sc.dirt_contrast},
                  {"seed", sc.seed}}},
                {"train_images", c.synth.train_images},
                {"val_images", c.synth.val_images},
                {"test_images", c.synth.test_images}};
  return j;
}

// Recursively checks that every key of `given` exists in `reference`.
void check_keys(const json& given, const json& reference, const std::string& path) {
  if (!given.is_object()) return;
  for (auto it = given.begin(); it != given.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!reference.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    if (reference[it.key()].is_object()) {
      if (!it.value().is_object()) throw ConfigError("config key '" + key + "' must be an object");
      check_keys(it.value(), reference[it.key()], key);
    }
  }
}

template <typename T>
void get(const json& j, const char* key, T& out, const std::string& path) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + path + key + "' has the wrong type");
  }
}

TrainingConfig from_j(const json& j) {
  TrainingConfig c;
  check_keys(j, to_j(c), "");
  get(j, "seed", c.seed, "");
  get(j, "lr", c.lr, "");
  get(j, "weight_decay", c.weight_decay, "");
  get(j, "clip_norm", c.clip_norm, "");
  get(j, "ema_decay", c.ema_decay, "");
  get(j, "ema_warmup", c.ema_warmup, "");
  get(j, "epochs", c.epochs, "");
  get(j, "batch_size", c.batch_size, "");
  get(j, "selection_metric", c.selection_metric, "");
  get(j, "augment_hflip", c.augment_hflip, "");
  get(j, "min_defect_images_per_batch", c.min_defect_images_per_batch, "");
  if (j.contains("schedule")) {
    const auto& s = j["schedule"];
    get(s, "kind", c.schedule.kind, "schedule.");
    get(s, "min_lr_factor", c.schedule.min_lr_factor, "schedule.");
  }
  if (j.contains("loss")) {
    const auto& l = j["loss"];
    auto& o = c.loss;
    get(l, "beta", o.beta, "loss.");
    get(l, "epsilon", o.epsilon, "loss.");
    get(l, "tau", o.tau, "loss.");
    get(l, "lambda_bin", o.lambda_bin, "loss.");
    get(l, "lambda_fine", o.lambda_fine, "loss.");
    get(l, "self_correction", o.self_correction, "loss.");
    get(l, "dice_per_image", o.dice_per_image, "loss.");
    if (l.contains("class_weights")) {
      const auto& w = l["class_weights"];
      if (w.is_string() && w.get<std::string>() == "auto")
        o.class_weights.clear();
      else if (w.is_array())
        get(l, "class_weights", o.class_weights, "loss.");
      else
        throw ConfigError("loss.class_weights must be \"auto\" or an array of numbers");
    }
    if (l.contains("warmup_steps")) {
      if (l["warmup_steps"].is_null())
        o.warmup_steps.reset();
      else if (l["warmup_steps"].is_number_integer())
        o.warmup_steps = l["warmup_steps"].get<long>();
      else
        throw ConfigError("loss.warmup_steps must be an integer or null");
    }
  }
  if (j.contains("model")) {
    const auto& m = j["model"];
    auto& o = c.model;
    get(m, "decoder_channels", o.decoder_channels, "model.");
    get(m, "detail_channels", o.detail_channels, "model.");
    get(m, "head_channels", o.head_channels, "model.");
    get(m, "num_classes", o.num_classes, "model.");
    get(m, "input_size", o.input_size, "model.");
    get(m, "bitfit", o.bitfit, "model.");
    get(m, "init_seed", o.init_seed, "model.");
    if (m.contains("norm")) {
      std::string n;
      get(m, "norm", n, "model.");
      if (n == "batch")
        o.norm = nn::NormKind::kBatch;
      else if (n == "group")
        o.norm = nn::NormKind::kGroup;
      else
        throw ConfigError("model.norm must be 'batch' or 'group'");
    }
    if (m.contains("backbone")) {
      const auto& b = m["backbone"];
      auto& bb = o.backbone;
      if (b.contains("kind")) {
        std::string k;
        get(b, "kind", k, "model.backbone.");
        // Switching kind resets the layout to that kind's defaults before
        // explicit fields apply.
        const auto kind = nn::parse_backbone_kind(k);
        if (kind != bb.kind)
          bb = kind == nn::BackboneKind::kTestStub ? nn::BackboneSpec::test_stub()
                                                   : nn::BackboneSpec::pretrained_vit_s14();
      }
      get(b, "tap_layers", bb.tap_layers, "model.backbone.");
      get(b, "patch_size", bb.patch_size, "model.backbone.");
      get(b, "embed_dim", bb.embed_dim, "model.backbone.");
      get(b, "depth", bb.depth, "model.backbone.");
      get(b, "num_heads", bb.num_heads, "model.backbone.");
      get(b, "mlp_ratio", bb.mlp_ratio, "model.backbone.");
      get(b, "layer_scale_init", bb.layer_scale_init, "model.backbone.");
      get(b, "weights", bb.weights, "model.backbone.");
    }
  }
  if (j.contains("teacher")) {
    const auto& t = j["teacher"];
    auto& o = c.teacher;
    if (t.contains("kind")) {
      std::string k;
      get(t, "kind", k, "teacher.");
      o.kind = parse_teacher_kind(k);
    }
    if (t.contains("overlap_policy")) {
      std::string k;
      get(t, "overlap_policy", k, "teacher.");
      o.overlap_policy = parse_overlap_policy(k);
    }
    get(t, "clip_to_box", o.clip_to_box, "teacher.");
    get(t, "model_id", o.model_id, "teacher.");
    get(t, "endpoint", o.endpoint, "teacher.");
    get(t, "command", o.command, "teacher.");
    get(t, "gt_root", o.gt_root, "teacher.");
    get(t, "seed", o.seed, "teacher.");
    get(t, "max_retries", o.max_retries, "teacher.");
    get(t, "timeout_seconds", o.timeout_seconds, "teacher.");
    if (t.contains("noise")) {
      const auto& n = t["noise"];
      get(n, "fn_component_drop_rate", o.noise.fn_component_drop_rate, "teacher.noise.");
      get(n, "fn_erode_radius", o.noise.fn_erode_radius, "teacher.noise.");
      get(n, "fp_blob_rate", o.noise.fp_blob_rate, "teacher.noise.");
      get(n, "box_omission_rate", o.noise.box_omission_rate, "teacher.noise.");
    }
  }
  if (j.contains("data")) {
    get(j["data"], "manifest", c.data.manifest, "data.");
    get(j["data"], "cache_root", c.data.cache_root, "data.");
  }
  if (j.contains("synth")) {
    const auto& s = j["synth"];
    get(s, "train_images", c.synth.train_images, "synth.");
    get(s, "val_images", c.synth.val_images, "synth.");
    get(s, "test_images", c.synth.test_images, "synth.");
    if (s.contains("scene")) {
      const auto& sc = s["scene"];
      auto& o = c.synth.scene;
      get(sc, "image_size", o.image_size, "synth.scene.");
      get(sc, "noise_scale", o.noise_scale, "synth.scene.");
      get(sc, "gradient_strength", o.gradient_strength, "synth.scene.");
      get(sc, "defect_image_fraction", o.defect_image_fraction, "synth.scene.");
      get(sc, "max_defects_per_image", o.max_defects_per_image, "synth.scene.");
      get(sc, "damage_contrast", o.damage_contrast, "synth.scene.");
      get(sc, "dirt_contrast", o.dirt_contrast, "synth.scene.");
      get(sc, "seed", o.seed, "synth.scene.");
    }
  }
  return c;
}

}  // namespace

std::string config_to_json(const TrainingConfig& cfg, int indent) { return to_j(cfg).dump(indent); }

TrainingConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  return from_j(j);
}

TrainingConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_json(ss.str());
}

TrainingConfig apply_overrides(const TrainingConfig& cfg, const std::vector<std::string>& overrides) {
  json j = to_j(cfg);
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + ov + "' is not KEY=VALUE");
    const std::string key = ov.substr(0, eq), raw = ov.substr(eq + 1);
    json* node = &j;
    std::size_t start = 0;
    while (true) {
      const auto dot = key.find('.', start);
      const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (!node->is_object() || !node->contains(part))
        throw ConfigError("override key '" + key + "' is not a declared config key");
      node = &(*node)[part];
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
    if (node->is_object()) throw ConfigError("override key '" + key + "' names a section, not a value");
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::parse_error&) {
      value = raw;
    }
    *node = value;
  }
  return from_j(j);
}

std::string config_hash(const TrainingConfig& cfg) { return hex64(fnv1a64(to_j(cfg).dump())); }

}  // namespace b2p
