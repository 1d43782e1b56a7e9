#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace b2p {

// Row-major H×W grid of scalars.
template <typename T>
struct Grid {
  int width = 0;
  int height = 0;
  std::vector<T> values;

  Grid() = default;
  Grid(int w, int h, T fill = T{})
      : width(w), height(h), values(static_cast<std::size_t>(w) * h, fill) {}

  T& operator()(int x, int y) { return values[static_cast<std::size_t>(y) * width + x]; }
  const T& operator()(int x, int y) const {
    return values[static_cast<std::size_t>(y) * width + x];
  }
  std::size_t size() const { return values.size(); }
  bool same_dims(int w, int h) const { return width == w && height == h; }
  bool operator==(const Grid&) const = default;
};

using LabelGrid = Grid<std::uint8_t>;
using MaskGrid = Grid<std::uint8_t>;  // 0 = false, nonzero = true

// Interleaved 8-bit RGB image.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // size = 3·W·H

  RgbImage() = default;
  RgbImage(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, 0) {}
  std::uint8_t* at(int x, int y) { return &pixels[(static_cast<std::size_t>(y) * width + x) * 3]; }
  const std::uint8_t* at(int x, int y) const {
    return &pixels[(static_cast<std::size_t>(y) * width + x) * 3];
  }
  bool operator==(const RgbImage&) const = default;
};

using Bytes = std::vector<std::uint8_t>;

// Decodes PNG or JPEG (by signature) to RGB.
RgbImage decode_image(std::span<const std::uint8_t> bytes);
RgbImage read_image(const std::filesystem::path& path);
Bytes read_file_bytes(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

Bytes encode_rgb_png(const RgbImage& img);
void write_rgb_png(const std::filesystem::path& path, const RgbImage& img);

// 8-bit indexed (palette) PNG whose pixel value is the label.
Bytes encode_label_png(const LabelGrid& labels);
// Accepts 8-bit palette or grayscale PNGs and returns raw sample values.
// Throws IntegrityError for undecodable data.
LabelGrid decode_label_png(std::span<const std::uint8_t> bytes);
LabelGrid read_label_png(const std::filesystem::path& path);
void write_label_png(const std::filesystem::path& path, const LabelGrid& labels);

// Single-channel 8-bit grayscale PNG.
Bytes encode_gray_png(const Grid<std::uint8_t>& gray);
void write_gray_png(const std::filesystem::path& path, const Grid<std::uint8_t>& gray);

// Nearest-neighbour resize using pixel-centre sampling.
LabelGrid resize_nearest(const LabelGrid& src, int width, int height);

// Bilinear resize with half-pixel centres (align_corners = false).
RgbImage resize_bilinear(const RgbImage& src, int width, int height);

// Mirror along the vertical axis.
RgbImage flip_horizontal(const RgbImage& img);
LabelGrid flip_horizontal(const LabelGrid& grid);

}  // namespace b2p
