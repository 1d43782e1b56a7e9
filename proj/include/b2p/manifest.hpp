#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "b2p/annotations.hpp"

namespace b2p {

enum class Split { kTrain, kVal, kTest };

std::string_view split_name(Split s);
Split parse_split(std::string_view name);

struct ImageRecord {
  std::string image_id;
  std::filesystem::path image_path;       // as stored; relative paths resolve against the manifest dir
  std::filesystem::path annotation_path;  // YOLO .txt; empty means no annotation file
  int width = 0;
  int height = 0;
  std::vector<BoxAnnotation> boxes;

  bool operator==(const ImageRecord&) const = default;
};

struct DatasetManifest {
  std::vector<std::string> class_names;
  std::vector<ImageRecord> records;
  std::map<std::string, Split> split_of;
  std::filesystem::path root;  // directory relative paths resolve against

  int num_classes() const { return static_cast<int>(class_names.size()); }
  const ImageRecord* find(std::string_view image_id) const;
  std::vector<const ImageRecord*> records_in(Split split) const;
  std::filesystem::path resolve(const std::filesystem::path& p) const;

  // Checks K >= 1, unique ids, every record has a split, dimensions >= 1,
  // and every box is valid. Throws ValidationError.
  void validate() const;

  // Logical equality (root excluded).
  bool same_content(const DatasetManifest& other) const;
};

struct ManifestLoad {
  DatasetManifest manifest;
  std::vector<std::string> warnings;  // e.g. image files that do not exist
};

// Reads the manifest JSON and every referenced YOLO annotation file.
ManifestLoad load_manifest(const std::filesystem::path& path);

// Writes the manifest JSON plus one YOLO file per record with a non-empty
// annotation_path. The manifest root becomes the manifest file's directory.
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

}  // namespace b2p
