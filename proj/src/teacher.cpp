#include "b2p/teacher.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <random>

#include <unistd.h>

#include "httplib.h"
#include "json.hpp"

#include "b2p/error.hpp"
#include "b2p/util.hpp"

namespace b2p {

using nlohmann::json;

std::string_view teacher_kind_name(TeacherKind k) {
  switch (k) {
    case TeacherKind::kFoundation: return "foundation";
    case TeacherKind::kOracleBoxfill: return "oracle_boxfill";
    case TeacherKind::kOracleGt: return "oracle_gt";
    case TeacherKind::kSyntheticNoisy: return "synthetic_noisy";
  }
  return "oracle_boxfill";
}

TeacherKind parse_teacher_kind(std::string_view name) {
  for (auto k : {TeacherKind::kFoundation, TeacherKind::kOracleBoxfill, TeacherKind::kOracleGt,
                 TeacherKind::kSyntheticNoisy})
    if (teacher_kind_name(k) == name) return k;
  throw ConfigError("unknown teacher kind '" + std::string(name) + "'");
}

std::string_view overlap_policy_name(OverlapPolicy p) {
  switch (p) {
    case OverlapPolicy::kHighestClassPriority: return "highest_class_priority";
    case OverlapPolicy::kLastWins: return "last_wins";
    case OverlapPolicy::kFirstWins: return "first_wins";
  }
  return "highest_class_priority";
}

OverlapPolicy parse_overlap_policy(std::string_view name) {
  for (auto p : {OverlapPolicy::kHighestClassPriority, OverlapPolicy::kLastWins,
                 OverlapPolicy::kFirstWins})
    if (overlap_policy_name(p) == name) return p;
  throw ConfigError("unknown overlap policy '" + std::string(name) + "'");
}

void NoiseProfile::validate() const {
  auto rate = [](double r) { return r >= 0.0 && r <= 1.0; };
  if (!rate(fn_component_drop_rate) || !rate(box_omission_rate))
    throw ConfigError("noise rates must lie in [0,1]");
  if (!(fp_blob_rate >= 0.0)) throw ConfigError("fp_blob_rate must be >= 0");
  if (fn_erode_radius < 0) throw ConfigError("fn_erode_radius must be >= 0");
}

void TeacherConfig::validate() const {
  noise.validate();
  if (max_retries < 0) throw ConfigError("teacher.max_retries must be >= 0");
  if (kind == TeacherKind::kFoundation && endpoint.empty() && command.empty() &&
      std::getenv("B2P_TEACHER_ENDPOINT") == nullptr)
    throw ConfigError("foundation teacher needs teacher.endpoint or teacher.command");
  if ((kind == TeacherKind::kOracleGt || kind == TeacherKind::kSyntheticNoisy) &&
      gt_root.empty())
    throw ConfigError(std::string(teacher_kind_name(kind)) + " teacher needs teacher.gt_root");
}

std::string teacher_fingerprint(const TeacherConfig& cfg) {
  json key = {{"kind", teacher_kind_name(cfg.kind)},
              {"clip_to_box", cfg.clip_to_box},
              {"policy", overlap_policy_name(cfg.overlap_policy)}};
  if (cfg.kind == TeacherKind::kFoundation) key["model_id"] = cfg.model_id;
  if (cfg.kind == TeacherKind::kSyntheticNoisy) {
    key["noise"] = {cfg.noise.fn_component_drop_rate, cfg.noise.fn_erode_radius,
                    cfg.noise.fp_blob_rate};
    key["seed"] = cfg.seed;
  }
  return std::string(teacher_kind_name(cfg.kind)) + "-" + hex64(fnv1a64(key.dump()));
}

MaskGrid erode(const MaskGrid& mask, int radius) {
  if (radius <= 0) return mask;
  MaskGrid out(mask.width, mask.height, 0);
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (!mask(x, y)) continue;
      bool keep = true;
      for (int dy = -radius; dy <= radius && keep; ++dy) {
        const int yy = y + dy;
        if (yy < 0 || yy >= mask.height) continue;
        for (int dx = -radius; dx <= radius; ++dx) {
          const int xx = x + dx;
          if (xx < 0 || xx >= mask.width) continue;
          if (!mask(xx, yy)) {
            keep = false;
            break;
          }
        }
      }
      out(x, y) = keep ? 1 : 0;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

MaskGrid BoxFillTeacher::segment(const TeacherInput& input, const PixelBox& box, int, int) {
  MaskGrid m(input.image->width, input.image->height, 0);
  for (int y = box.y0; y < box.y1; ++y)
    for (int x = box.x0; x < box.x1; ++x) m(x, y) = 1;
  return m;
}

GroundTruthSource ground_truth_from_dir(std::filesystem::path dir) {
  return [dir = std::move(dir)](const std::string& image_id) {
    return read_label_png(dir / (image_id + ".png"));
  };
}

GroundTruthTeacher::GroundTruthTeacher(GroundTruthSource gt) : gt_(std::move(gt)) {}

namespace {

MaskGrid gt_class_in_box(const PseudoLabelMap& gt, const PixelBox& box, int class_id) {
  MaskGrid m(gt.width, gt.height, 0);
  const auto label = static_cast<std::uint8_t>(class_id + 1);
  for (int y = box.y0; y < box.y1; ++y)
    for (int x = box.x0; x < box.x1; ++x)
      if (gt(x, y) == label) m(x, y) = 1;
  return m;
}

PseudoLabelMap load_gt_checked(const GroundTruthSource& src, const TeacherInput& input) {
  PseudoLabelMap gt = src(input.image_id);
  if (!gt.same_dims(input.image->width, input.image->height))
    throw ValidationError("ground truth for '" + input.image_id + "' has wrong dimensions");
  return gt;
}

}  // namespace

MaskGrid GroundTruthTeacher::segment(const TeacherInput& input, const PixelBox& box, int class_id,
                                     int) {
  return gt_class_in_box(load_gt_checked(gt_, input), box, class_id);
}

NoisyGroundTruthTeacher::NoisyGroundTruthTeacher(GroundTruthSource gt, NoiseProfile noise,
                                                 std::uint64_t seed)
    : gt_(std::move(gt)), noise_(noise), seed_(seed) {
  noise_.validate();
}

MaskGrid NoisyGroundTruthTeacher::segment(const TeacherInput& input, const PixelBox& box,
                                          int class_id, int box_index) {
  const PseudoLabelMap gt = load_gt_checked(gt_, input);
  MaskGrid m = gt_class_in_box(gt, box, class_id);
  std::mt19937_64 rng(
      mix_seed(mix_seed(seed_, input.image_id), static_cast<std::uint64_t>(box_index)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const bool drop = unit(rng) < noise_.fn_component_drop_rate;
  if (drop) {
    std::fill(m.values.begin(), m.values.end(), 0);
  } else {
    m = erode(m, noise_.fn_erode_radius);
  }
  // Spurious blobs: Poisson with the per-image rate split across boxes.
  const double per_box = noise_.fp_blob_rate / std::max(1, input.num_boxes);
  const int blobs = per_box > 0.0 ? std::poisson_distribution<int>(per_box)(rng) : 0;
  for (int b = 0; b < blobs; ++b) {
    const int cx = box.x0 + static_cast<int>(unit(rng) * box.width());
    const int cy = box.y0 + static_cast<int>(unit(rng) * box.height());
    const int r = 1 + static_cast<int>(unit(rng) * 2.0);
    for (int y = cy - r; y <= cy + r; ++y)
      for (int x = cx - r; x <= cx + r; ++x)
        if (box.contains(x, y) && (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r &&
            gt(x, y) == 0)
          m(x, y) = 1;
  }
  return m;
}

// ---------------------------------------------------------------------------

FoundationTeacher::FoundationTeacher(std::unique_ptr<SegmentationBackend> backend)
    : backend_(std::move(backend)) {}

MaskGrid FoundationTeacher::segment(const TeacherInput& input, const PixelBox& box, int, int) {
  std::vector<ScoredMask> masks = backend_->segment(input.image_bytes, box);
  if (masks.empty()) throw TeacherError("backend returned no mask for '" + input.image_id + "'");
  auto best = std::max_element(masks.begin(), masks.end(),
                               [](const ScoredMask& a, const ScoredMask& b) {
                                 return a.score < b.score;
                               });
  return std::move(best->mask);
}

namespace {

MaskGrid mask_from_png(std::span<const std::uint8_t> bytes) {
  try {
    return decode_label_png(bytes);
  } catch (const IntegrityError&) {
    // Tolerate RGB masks: any nonzero channel is foreground.
    RgbImage rgb = decode_image(bytes);
    MaskGrid m(rgb.width, rgb.height, 0);
    for (int y = 0; y < rgb.height; ++y)
      for (int x = 0; x < rgb.width; ++x) {
        const auto* p = rgb.at(x, y);
        m(x, y) = (p[0] | p[1] | p[2]) ? 1 : 0;
      }
    return m;
  }
}

}  // namespace

HttpSegmenter::HttpSegmenter(std::string endpoint, int timeout_seconds)
    : timeout_seconds_(timeout_seconds) {
  const auto scheme = endpoint.find("://");
  if (scheme == std::string::npos) throw ConfigError("endpoint must be a URL: " + endpoint);
  const auto slash = endpoint.find('/', scheme + 3);
  host_ = endpoint.substr(0, slash);
  path_ = slash == std::string::npos ? "/segment" : endpoint.substr(slash);
}

std::vector<ScoredMask> HttpSegmenter::segment(std::span<const std::uint8_t> image_bytes,
                                               const PixelBox& box) {
  httplib::Client client(host_);
  client.set_connection_timeout(timeout_seconds_, 0);
  client.set_read_timeout(timeout_seconds_, 0);
  const json request = {{"image_base64", base64_encode(image_bytes)},
                        {"box", {box.x0, box.y0, box.x1, box.y1}},
                        {"multimask", false}};
  auto res = client.Post(path_, request.dump(), "application/json");
  if (!res) throw TeacherError("teacher endpoint unreachable: " + host_ + path_);
  if (res->status != 200)
    throw TeacherError("teacher endpoint returned HTTP " + std::to_string(res->status));
  std::vector<ScoredMask> out;
  try {
    const json body = json::parse(res->body);
    if (body.contains("masks")) {
      for (const auto& m : body.at("masks")) {
        ScoredMask sm;
        sm.score = m.value("score", 0.0);
        sm.mask = mask_from_png(base64_decode(m.at("mask_png_base64").get<std::string>()));
        out.push_back(std::move(sm));
      }
    } else {
      ScoredMask sm;
      sm.score = body.value("score", 1.0);
      sm.mask = mask_from_png(base64_decode(body.at("mask_png_base64").get<std::string>()));
      out.push_back(std::move(sm));
    }
  } catch (const json::exception& e) {
    throw TeacherError(std::string("malformed teacher response: ") + e.what());
  } catch (const Error& e) {
    throw TeacherError(std::string("malformed teacher mask: ") + e.what());
  }
  return out;
}

CommandSegmenter::CommandSegmenter(std::string command_template)
    : template_(std::move(command_template)) {}

std::vector<ScoredMask> CommandSegmenter::segment(std::span<const std::uint8_t> image_bytes,
                                                  const PixelBox& box) {
  static int counter = 0;
  const auto tmp = std::filesystem::temp_directory_path() /
                   ("b2p_teacher_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  std::filesystem::create_directories(tmp);
  const auto image_path = tmp / "image.bin";
  const auto out_path = tmp / "mask.png";
  write_file_atomic(image_path, image_bytes);
  std::string cmd = template_;
  auto replace_all = [&cmd](const std::string& key, const std::string& value) {
    for (std::size_t p = cmd.find(key); p != std::string::npos; p = cmd.find(key, p + value.size()))
      cmd.replace(p, key.size(), value);
  };
  replace_all("{image}", "'" + image_path.string() + "'");
  replace_all("{out}", "'" + out_path.string() + "'");
  replace_all("{x0}", std::to_string(box.x0));
  replace_all("{y0}", std::to_string(box.y0));
  replace_all("{x1}", std::to_string(box.x1));
  replace_all("{y1}", std::to_string(box.y1));
  const int rc = std::system(cmd.c_str());
  std::vector<ScoredMask> out;
  std::string failure;
  if (rc != 0) {
    failure = "teacher command exited with status " + std::to_string(rc);
  } else if (!std::filesystem::exists(out_path)) {
    failure = "teacher command produced no mask";
  } else {
    try {
      out.push_back({mask_from_png(read_file_bytes(out_path)), 1.0});
    } catch (const Error& e) {
      failure = std::string("teacher command mask unreadable: ") + e.what();
    }
  }
  std::error_code ec;
  std::filesystem::remove_all(tmp, ec);
  if (!failure.empty()) throw TeacherError(failure);
  return out;
}

std::unique_ptr<Teacher> make_teacher(const TeacherConfig& cfg) {
  cfg.validate();
  switch (cfg.kind) {
    case TeacherKind::kOracleBoxfill: return std::make_unique<BoxFillTeacher>();
    case TeacherKind::kOracleGt:
      return std::make_unique<GroundTruthTeacher>(ground_truth_from_dir(cfg.gt_root));
    case TeacherKind::kSyntheticNoisy:
      return std::make_unique<NoisyGroundTruthTeacher>(ground_truth_from_dir(cfg.gt_root),
                                                       cfg.noise, cfg.seed);
    case TeacherKind::kFoundation: {
      std::string endpoint = cfg.endpoint;
      std::string command = cfg.command;
      if (const char* env = std::getenv("B2P_TEACHER_ENDPOINT"); env && *env) {
        const std::string v = env;
        if (v.starts_with("http://") || v.starts_with("https://")) {
          endpoint = v;
          command.clear();
        } else {
          command = v;
          endpoint.clear();
        }
      }
      std::unique_ptr<SegmentationBackend> backend;
      if (!endpoint.empty())
        backend = std::make_unique<HttpSegmenter>(endpoint, cfg.timeout_seconds);
      else
        backend = std::make_unique<CommandSegmenter>(command);
      return std::make_unique<FoundationTeacher>(std::move(backend));
    }
  }
  throw ConfigError("unsupported teacher kind");
}

TeacherMask generate_mask(Teacher& teacher, const TeacherInput& input, const PixelBox& box,
                          int class_id, int box_index, bool clip_to_box) {
  if (input.image == nullptr) throw ValidationError("teacher input has no image");
  const int w = input.image->width;
  const int h = input.image->height;
  if (!is_valid_pixel_box(box, w, h)) throw ValidationError("prompt box outside image bounds");
  TeacherMask out;
  out.source_box_index = box_index;
  out.class_id = class_id;
  out.mask = teacher.segment(input, box, class_id, box_index);
  if (!out.mask.same_dims(w, h))
    throw TeacherError("teacher mask is " + std::to_string(out.mask.width) + "x" +
                       std::to_string(out.mask.height) + ", image is " + std::to_string(w) + "x" +
                       std::to_string(h));
  for (auto& v : out.mask.values) v = v ? 1 : 0;
  if (clip_to_box) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (!box.contains(x, y)) out.mask(x, y) = 0;
  }
  return out;
}

PseudoLabelMap rasterize(const std::vector<TeacherMask>& masks, int width, int height,
                         OverlapPolicy policy) {
  PseudoLabelMap out(width, height, 0);
  for (const auto& m : masks) {
    if (!m.mask.same_dims(width, height)) throw ValidationError("rasterize: mask dimension mismatch");
    if (m.class_id < 0 || m.class_id > 254) throw ValidationError("rasterize: class id out of range");
  }
  for (const auto& m : masks) {
    const auto label = static_cast<std::uint8_t>(m.class_id + 1);
    for (std::size_t i = 0; i < out.values.size(); ++i) {
      if (!m.mask.values[i]) continue;
      auto& cur = out.values[i];
      switch (policy) {
        case OverlapPolicy::kHighestClassPriority: cur = std::max(cur, label); break;
        case OverlapPolicy::kLastWins: cur = label; break;
        case OverlapPolicy::kFirstWins:
          if (cur == 0) cur = label;
          break;
      }
    }
  }
  return out;
}

void validate_label_map(const PseudoLabelMap& map, int num_classes) {
  if (map.values.size() != static_cast<std::size_t>(map.width) * map.height)
    throw ValidationError("label map size does not match its dimensions");
  for (auto v : map.values)
    if (v > num_classes)
      throw ValidationError("label " + std::to_string(v) + " exceeds K=" +
                            std::to_string(num_classes));
}

PseudoLabelCache::PseudoLabelCache(std::filesystem::path root, std::string fingerprint)
    : dir_(std::move(root) / std::move(fingerprint)) {}

std::filesystem::path PseudoLabelCache::path_for(std::string_view image_id) const {
  return dir_ / (std::string(image_id) + ".png");
}

bool PseudoLabelCache::contains(std::string_view image_id) const {
  return std::filesystem::exists(path_for(image_id));
}

void PseudoLabelCache::store(const PseudoLabelMap& map, std::string_view image_id,
                             int num_classes) const {
  validate_label_map(map, num_classes);
  write_label_png(path_for(image_id), map);
}

std::optional<PseudoLabelMap> PseudoLabelCache::load(std::string_view image_id) const {
  const auto p = path_for(image_id);
  if (!std::filesystem::exists(p)) return std::nullopt;
  return read_label_png(p);
}

}  // namespace b2p
