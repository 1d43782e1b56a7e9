#include "b2p/pseudo_labels.hpp"

#include "json.hpp"

#include "b2p/error.hpp"

namespace b2p {

std::string PseudoLabelReport::to_json() const {
  nlohmann::json fails = nlohmann::json::array();
  for (const auto& f : failures) fails.push_back({{"image_id", f.image_id}, {"error", f.error}});
  nlohmann::json doc = {{"fingerprint", fingerprint}, {"images", images},
                        {"boxes", boxes},             {"empty_masks", empty_masks},
                        {"generated", generated},     {"cache_hits", cache_hits},
                        {"failures", fails}};
  return doc.dump(2);
}

std::vector<TeacherMask> teacher_masks_for_image(Teacher& teacher, const TeacherInput& input,
                                                 const std::vector<BoxAnnotation>& boxes,
                                                 bool clip_to_box, int max_retries) {
  std::vector<TeacherMask> masks;
  masks.reserve(boxes.size());
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const PixelBox pb = box_to_pixels(boxes[i], input.image->width, input.image->height);
    for (int attempt = 0;; ++attempt) {
      try {
        masks.push_back(generate_mask(teacher, input, pb, boxes[i].class_id,
                                      static_cast<int>(i), clip_to_box));
        break;
      } catch (const TeacherError&) {
        if (attempt >= max_retries) throw;
      }
    }
  }
  return masks;
}

PseudoLabelReport build_pseudo_labels(const DatasetManifest& manifest, Teacher& teacher,
                                      const TeacherConfig& cfg,
                                      const std::filesystem::path& cache_root,
                                      const PseudoLabelOptions& options) {
  manifest.validate();
  PseudoLabelReport report;
  report.fingerprint = teacher_fingerprint(cfg);
  const PseudoLabelCache cache(cache_root, report.fingerprint);
  for (const auto& rec : manifest.records) {
    const Split split = manifest.split_of.at(rec.image_id);
    if (std::find(options.splits.begin(), options.splits.end(), split) == options.splits.end())
      continue;
    ++report.images;
    if (options.reuse_cache && cache.contains(rec.image_id)) {
      ++report.cache_hits;
      continue;
    }
    try {
      const auto path = manifest.resolve(rec.image_path);
      const Bytes bytes = read_file_bytes(path);
      RgbImage image;
      try {
        image = decode_image(bytes);
      } catch (const IntegrityError& e) {
        throw IoError(path.string() + ": " + e.what());
      }
      if (image.width != rec.width || image.height != rec.height)
        throw ValidationError("image '" + rec.image_id + "' size differs from manifest");
      TeacherInput input{rec.image_id, &image, bytes, static_cast<int>(rec.boxes.size())};
      const auto masks =
          teacher_masks_for_image(teacher, input, rec.boxes, cfg.clip_to_box, cfg.max_retries);
      int empty = 0;
      for (const auto& m : masks)
        if (std::none_of(m.mask.values.begin(), m.mask.values.end(), [](auto v) { return v; }))
          ++empty;
      const PseudoLabelMap map = rasterize(masks, image.width, image.height, cfg.overlap_policy);
      cache.store(map, rec.image_id, manifest.num_classes());
      report.boxes += static_cast<int>(masks.size());
      report.empty_masks += empty;
      ++report.generated;
    } catch (const Error& e) {
      report.failures.push_back({rec.image_id, e.what()});
    }
  }
  return report;
}

}  // namespace b2p
