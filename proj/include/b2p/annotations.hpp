#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace b2p {

// One normalized YOLO box: class id plus centre/size in [0,1] image units.
struct BoxAnnotation {
  int class_id = 0;
  double cx = 0.5;
  double cy = 0.5;
  double w = 1.0;
  double h = 1.0;

  bool operator==(const BoxAnnotation&) const = default;
};

// Half-open pixel rectangle [x0,x1)×[y0,y1).
struct PixelBox {
  int x0 = 0;
  int y0 = 0;
  int x1 = 1;
  int y1 = 1;

  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  bool contains(int x, int y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
  bool operator==(const PixelBox&) const = default;
};

// Throws ValidationError if `box` breaks the coordinate or class invariants.
void validate_box(const BoxAnnotation& box, int num_classes);

// True iff the pixel box is non-empty and lies inside a W×H image.
bool is_valid_pixel_box(const PixelBox& box, int width, int height);

// Parses YOLO `class cx cy w h` lines. Blank lines are skipped.
// Malformed lines raise ParseError (with line number); out-of-range values
// raise ValidationError.
std::vector<BoxAnnotation> parse_yolo_annotations(std::string_view text, int num_classes);

// Shortest round-trip decimal form, one line per box.
std::string serialize_yolo_annotations(const std::vector<BoxAnnotation>& boxes);

// Edges rounded half away from zero, clamped to the image, and degenerate
// boxes grown to one pixel toward the interior.
PixelBox box_to_pixels(const BoxAnnotation& box, int width, int height);

// Tight normalized box around a pixel rectangle.
BoxAnnotation pixels_to_box(const PixelBox& box, int class_id, int width, int height);

}  // namespace b2p
