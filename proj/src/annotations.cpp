#include "b2p/annotations.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <sstream>

#include "b2p/error.hpp"

namespace b2p {
namespace {

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

template <typename T>
bool parse_number(std::string_view s, T& out) {
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (first != last && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last;
}

int round_half_away(double v) { return static_cast<int>(std::round(v)); }

}  // namespace

void validate_box(const BoxAnnotation& b, int num_classes) {
  if (b.class_id < 0 || b.class_id >= num_classes)
    throw ValidationError("class id " + std::to_string(b.class_id) + " outside [0," +
                          std::to_string(num_classes) + ")");
  auto in01 = [](double v) { return std::isfinite(v) && v >= 0.0 && v <= 1.0; };
  if (!in01(b.cx) || !in01(b.cy)) throw ValidationError("box centre outside [0,1]");
  if (!in01(b.w) || !in01(b.h) || b.w <= 0.0 || b.h <= 0.0)
    throw ValidationError("box size outside (0,1]");
}

bool is_valid_pixel_box(const PixelBox& b, int width, int height) {
  return 0 <= b.x0 && b.x0 < b.x1 && b.x1 <= width && 0 <= b.y0 && b.y0 < b.y1 &&
         b.y1 <= height;
}

std::vector<BoxAnnotation> parse_yolo_annotations(std::string_view text, int num_classes) {
  std::vector<BoxAnnotation> boxes;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    ++line_no;
    pos = end + 1;
    const auto fields = split_ws(line);
    if (fields.empty()) {
      if (end == text.size()) break;
      continue;
    }
    if (fields.size() != 5)
      throw ParseError("expected 5 fields, got " + std::to_string(fields.size()), line_no);
    BoxAnnotation b;
    if (!parse_number(fields[0], b.class_id))
      throw ParseError("class id is not an integer: '" + std::string(fields[0]) + "'", line_no);
    double* coords[] = {&b.cx, &b.cy, &b.w, &b.h};
    for (int k = 0; k < 4; ++k) {
      if (!parse_number(fields[static_cast<std::size_t>(k + 1)], *coords[k]))
        throw ParseError("not a number: '" + std::string(fields[static_cast<std::size_t>(k + 1)]) +
                             "'",
                         line_no);
    }
    try {
      validate_box(b, num_classes);
    } catch (const ValidationError& e) {
      throw ValidationError("line " + std::to_string(line_no) + ": " + e.what());
    }
    boxes.push_back(b);
    if (end == text.size()) break;
  }
  return boxes;
}

std::string serialize_yolo_annotations(const std::vector<BoxAnnotation>& boxes) {
  std::string out;
  char buf[64];
  for (const auto& b : boxes) {
    out += std::to_string(b.class_id);
    for (double v : {b.cx, b.cy, b.w, b.h}) {
      auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
      out += ' ';
      out.append(buf, ptr);
    }
    out += '\n';
  }
  return out;
}

PixelBox box_to_pixels(const BoxAnnotation& b, int width, int height) {
  if (width < 1 || height < 1) throw ValidationError("image dimensions must be >= 1");
  auto axis = [](double c, double s, int n, int& lo, int& hi) {
    lo = std::clamp(round_half_away((c - s / 2.0) * n), 0, n);
    hi = std::clamp(round_half_away((c + s / 2.0) * n), 0, n);
    if (hi <= lo) {
      if (lo < n) {
        hi = lo + 1;
      } else {
        lo = n - 1;
        hi = n;
      }
    }
  };
  PixelBox p;
  axis(b.cx, b.w, width, p.x0, p.x1);
  axis(b.cy, b.h, height, p.y0, p.y1);
  return p;
}

BoxAnnotation pixels_to_box(const PixelBox& p, int class_id, int width, int height) {
  BoxAnnotation b;
  b.class_id = class_id;
  b.cx = (p.x0 + p.x1) / 2.0 / width;
  b.cy = (p.y0 + p.y1) / 2.0 / height;
  b.w = static_cast<double>(p.x1 - p.x0) / width;
  b.h = static_cast<double>(p.y1 - p.y0) / height;
  return b;
}

}  // namespace b2p
