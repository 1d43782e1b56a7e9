#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "b2p/annotations.hpp"
#include "b2p/image.hpp"

namespace b2p {

// Per-pixel labels in {0..K}; 0 is background, YOLO class c maps to c+1.
using PseudoLabelMap = LabelGrid;

struct TeacherMask {
  MaskGrid mask;
  int source_box_index = 0;
  int class_id = 0;
};

enum class TeacherKind { kFoundation, kOracleBoxfill, kOracleGt, kSyntheticNoisy };
enum class OverlapPolicy { kHighestClassPriority, kLastWins, kFirstWins };

std::string_view teacher_kind_name(TeacherKind k);
TeacherKind parse_teacher_kind(std::string_view name);
std::string_view overlap_policy_name(OverlapPolicy p);
OverlapPolicy parse_overlap_policy(std::string_view name);

// Controlled corruption of ground-truth masks, modelling the teacher's
// characteristic false negatives (missed or thinned components), spurious
// blobs, and missing boxes.
struct NoiseProfile {
  double fn_component_drop_rate = 0.3;
  int fn_erode_radius = 1;
  double fp_blob_rate = 0.5;
  double box_omission_rate = 0.15;

  static NoiseProfile none() { return {0.0, 0, 0.0, 0.0}; }
  void validate() const;
  bool operator==(const NoiseProfile&) const = default;
};

struct TeacherConfig {
  TeacherKind kind = TeacherKind::kOracleBoxfill;
  bool clip_to_box = true;
  OverlapPolicy overlap_policy = OverlapPolicy::kHighestClassPriority;
  std::string model_id = "sam-vit-h";  // foundation only, part of the fingerprint
  std::string endpoint;                // http(s)://host:port/path
  std::string command;                 // local runner template, see CommandSegmenter
  std::string gt_root;                 // oracle_gt / synthetic_noisy: dir of <image_id>.png
  NoiseProfile noise;
  std::uint64_t seed = 0;
  int max_retries = 2;
  int timeout_seconds = 60;

  void validate() const;
};

// Stable identifier of everything that determines the teacher's output:
// kind, model/noise parameters, clipping, and overlap policy.
std::string teacher_fingerprint(const TeacherConfig& cfg);

struct TeacherInput {
  std::string image_id;
  const RgbImage* image = nullptr;              // decoded pixels
  std::span<const std::uint8_t> image_bytes;    // encoded file, for remote backends
  int num_boxes = 1;                            // boxes in this image
};

class Teacher {
 public:
  virtual ~Teacher() = default;
  // Returns a W×H mask for the box prompt. May throw TeacherError (retriable).
  virtual MaskGrid segment(const TeacherInput& input, const PixelBox& box, int class_id,
                           int box_index) = 0;
};

// Promptable-segmenter backend contract: one box prompt in, masks out.
struct ScoredMask {
  MaskGrid mask;
  double score = 0.0;
};

class SegmentationBackend {
 public:
  virtual ~SegmentationBackend() = default;
  virtual std::vector<ScoredMask> segment(std::span<const std::uint8_t> image_bytes,
                                          const PixelBox& box) = 0;
};

// HTTP adapter. POSTs JSON
//   {"image_base64": <encoded file>, "box": [x0, y0, x1, y1], "multimask": false}
// and expects {"masks": [{"score": s, "mask_png_base64": <PNG>}, ...]} or
// {"mask_png_base64": <PNG>}. Any nonzero mask sample is foreground.
class HttpSegmenter : public SegmentationBackend {
 public:
  HttpSegmenter(std::string endpoint, int timeout_seconds);
  std::vector<ScoredMask> segment(std::span<const std::uint8_t> image_bytes,
                                  const PixelBox& box) override;

 private:
  std::string host_;
  std::string path_;
  int timeout_seconds_;
};

// Local runner adapter: runs a shell command template after substituting
// {image} {x0} {y0} {x1} {y1} {out}; the command must write a mask PNG to
// {out} and exit 0.
class CommandSegmenter : public SegmentationBackend {
 public:
  explicit CommandSegmenter(std::string command_template);
  std::vector<ScoredMask> segment(std::span<const std::uint8_t> image_bytes,
                                  const PixelBox& box) override;

 private:
  std::string template_;
};

// Foundation teacher: keeps the single top-scoring mask from the backend.
class FoundationTeacher : public Teacher {
 public:
  explicit FoundationTeacher(std::unique_ptr<SegmentationBackend> backend);
  MaskGrid segment(const TeacherInput& input, const PixelBox& box, int class_id,
                   int box_index) override;

 private:
  std::unique_ptr<SegmentationBackend> backend_;
};

class BoxFillTeacher : public Teacher {
 public:
  MaskGrid segment(const TeacherInput& input, const PixelBox& box, int class_id,
                   int box_index) override;
};

using GroundTruthSource = std::function<PseudoLabelMap(const std::string& image_id)>;
GroundTruthSource ground_truth_from_dir(std::filesystem::path dir);

// Ground-truth pixels of the prompted class inside the box.
class GroundTruthTeacher : public Teacher {
 public:
  explicit GroundTruthTeacher(GroundTruthSource gt);
  MaskGrid segment(const TeacherInput& input, const PixelBox& box, int class_id,
                   int box_index) override;

 private:
  GroundTruthSource gt_;
};

// GroundTruthTeacher output corrupted per NoiseProfile. Randomness is keyed on
// (seed, image id, box index) so results do not depend on call order.
// box_omission_rate is not applied here: omitted boxes never reach a teacher.
class NoisyGroundTruthTeacher : public Teacher {
 public:
  NoisyGroundTruthTeacher(GroundTruthSource gt, NoiseProfile noise, std::uint64_t seed);
  MaskGrid segment(const TeacherInput& input, const PixelBox& box, int class_id,
                   int box_index) override;

 private:
  GroundTruthSource gt_;
  NoiseProfile noise_;
  std::uint64_t seed_;
};

// Builds the teacher described by `cfg`. B2P_TEACHER_ENDPOINT, when set,
// overrides the foundation backend (http(s) URL or local runner command).
std::unique_ptr<Teacher> make_teacher(const TeacherConfig& cfg);

// Binary erosion with a (2r+1)² square; out-of-image neighbours are ignored.
MaskGrid erode(const MaskGrid& mask, int radius);

// Runs the teacher on one box and enforces the mask contract: dimensions
// equal the image's, and (when clip_to_box) no pixel outside the box.
TeacherMask generate_mask(Teacher& teacher, const TeacherInput& input, const PixelBox& box,
                          int class_id, int box_index, bool clip_to_box);

// Paints masks into a label map: pixel label = class_id + 1, background 0.
PseudoLabelMap rasterize(const std::vector<TeacherMask>& masks, int width, int height,
                         OverlapPolicy policy);

// Throws ValidationError if any label exceeds num_classes.
void validate_label_map(const PseudoLabelMap& map, int num_classes);

// Offline pseudo-label store: <root>/<fingerprint>/<image_id>.png.
class PseudoLabelCache {
 public:
  PseudoLabelCache(std::filesystem::path root, std::string fingerprint);
  std::filesystem::path path_for(std::string_view image_id) const;
  bool contains(std::string_view image_id) const;
  void store(const PseudoLabelMap& map, std::string_view image_id, int num_classes) const;
  // nullopt when absent; IntegrityError when present but undecodable.
  std::optional<PseudoLabelMap> load(std::string_view image_id) const;
  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
};

}  // namespace b2p
