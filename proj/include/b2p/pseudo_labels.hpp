#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "b2p/manifest.hpp"
#include "b2p/teacher.hpp"

namespace b2p {

struct PseudoLabelFailure {
  std::string image_id;
  std::string error;
};

struct PseudoLabelReport {
  std::string fingerprint;
  int images = 0;       // images considered
  int boxes = 0;        // boxes prompted (excludes cache hits)
  int empty_masks = 0;  // teacher returned nothing inside the box
  int generated = 0;    // maps written this run
  int cache_hits = 0;   // maps already present
  std::vector<PseudoLabelFailure> failures;

  std::string to_json() const;
};

struct PseudoLabelOptions {
  std::vector<Split> splits{Split::kTrain, Split::kVal};
  bool reuse_cache = true;
};

// Generates and caches one pseudo-label map per image. Per-image failures
// (after teacher retries) are recorded and the run continues.
PseudoLabelReport build_pseudo_labels(const DatasetManifest& manifest, Teacher& teacher,
                                      const TeacherConfig& cfg,
                                      const std::filesystem::path& cache_root,
                                      const PseudoLabelOptions& options = {});

// Teacher masks for every box of one image, in box order.
std::vector<TeacherMask> teacher_masks_for_image(Teacher& teacher, const TeacherInput& input,
                                                 const std::vector<BoxAnnotation>& boxes,
                                                 bool clip_to_box, int max_retries);

}  // namespace b2p
