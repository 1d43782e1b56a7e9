#include "b2p/manifest.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "b2p/error.hpp"
#include "b2p/image.hpp"

namespace b2p {

using nlohmann::json;

std::string_view split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "train";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw ValidationError("unknown split '" + std::string(name) + "'");
}

const ImageRecord* DatasetManifest::find(std::string_view image_id) const {
  for (const auto& r : records)
    if (r.image_id == image_id) return &r;
  return nullptr;
}

std::vector<const ImageRecord*> DatasetManifest::records_in(Split split) const {
  std::vector<const ImageRecord*> out;
  for (const auto& r : records) {
    auto it = split_of.find(r.image_id);
    if (it != split_of.end() && it->second == split) out.push_back(&r);
  }
  return out;
}

std::filesystem::path DatasetManifest::resolve(const std::filesystem::path& p) const {
  if (p.empty() || p.is_absolute()) return p;
  return root / p;
}

void DatasetManifest::validate() const {
  if (class_names.empty()) throw ValidationError("manifest declares no classes");
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (r.image_id.empty()) throw ValidationError("record with empty image id");
    if (!seen.insert(r.image_id).second)
      throw ValidationError("duplicate image id '" + r.image_id + "'");
    if (!split_of.contains(r.image_id))
      throw ValidationError("image '" + r.image_id + "' has no split");
    if (r.width < 1 || r.height < 1)
      throw ValidationError("image '" + r.image_id + "' has invalid dimensions");
    for (const auto& b : r.boxes) {
      try {
        validate_box(b, num_classes());
      } catch (const ValidationError& e) {
        throw ValidationError("image '" + r.image_id + "': " + e.what());
      }
    }
  }
}

bool DatasetManifest::same_content(const DatasetManifest& o) const {
  return class_names == o.class_names && records == o.records && split_of == o.split_of;
}

ManifestLoad load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError("manifest " + path.string() + ": " + e.what());
  }
  ManifestLoad result;
  DatasetManifest& m = result.manifest;
  m.root = path.parent_path();
  try {
    m.class_names = doc.at("classes").get<std::vector<std::string>>();
    for (const auto& item : doc.at("images")) {
      ImageRecord r;
      r.image_id = item.at("id").get<std::string>();
      r.image_path = item.at("path").get<std::string>();
      r.width = item.at("width").get<int>();
      r.height = item.at("height").get<int>();
      if (item.contains("annotation_path") && !item["annotation_path"].is_null())
        r.annotation_path = item["annotation_path"].get<std::string>();
      if (!item.contains("split") || item["split"].is_null())
        throw ValidationError("image '" + r.image_id + "' has no split");
      if (m.split_of.contains(r.image_id))
        throw ValidationError("duplicate image id '" + r.image_id + "'");
      m.split_of[r.image_id] = parse_split(item["split"].get<std::string>());
      m.records.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw ValidationError("manifest " + path.string() + ": " + e.what());
  }
  if (m.class_names.empty()) throw ValidationError("manifest declares no classes");
  for (auto& r : m.records) {
    if (!std::filesystem::exists(m.resolve(r.image_path)))
      result.warnings.push_back("missing image file for '" + r.image_id +
                                "': " + m.resolve(r.image_path).string());
    if (r.annotation_path.empty()) continue;
    const auto ann = m.resolve(r.annotation_path);
    if (!std::filesystem::exists(ann)) {
      result.warnings.push_back("missing annotation file for '" + r.image_id +
                                "' (treated as no boxes)");
      continue;
    }
    std::ifstream af(ann);
    std::stringstream ss;
    ss << af.rdbuf();
    try {
      r.boxes = parse_yolo_annotations(ss.str(), m.num_classes());
    } catch (const ParseError& e) {
      throw ParseError(ann.string() + ": " + e.what(), e.line());
    } catch (const ValidationError& e) {
      throw ValidationError(ann.string() + ": " + e.what());
    }
  }
  m.validate();
  return result;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  manifest.validate();
  DatasetManifest target = manifest;
  target.root = path.parent_path();
  json images = json::array();
  for (const auto& r : manifest.records) {
    json item = {{"id", r.image_id},
                 {"path", r.image_path.generic_string()},
                 {"width", r.width},
                 {"height", r.height},
                 {"split", split_name(manifest.split_of.at(r.image_id))}};
    if (!r.annotation_path.empty()) {
      item["annotation_path"] = r.annotation_path.generic_string();
      const std::string text = serialize_yolo_annotations(r.boxes);
      write_file_atomic(target.resolve(r.annotation_path),
                        std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    } else if (!r.boxes.empty()) {
      throw ValidationError("image '" + r.image_id + "' has boxes but no annotation_path");
    }
    images.push_back(std::move(item));
  }
  json doc = {{"version", 1}, {"classes", manifest.class_names}, {"images", images}};
  const std::string text = doc.dump(2) + "\n";
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace b2p
