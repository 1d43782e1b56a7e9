#include "b2p/image.hpp"

#include <png.h>
// jpeglib.h expects FILE and size_t declared.
#include <cstdio>
#include <jpeglib.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstring>
#include <fstream>

#include "b2p/error.hpp"

namespace b2p {
namespace {

struct MemReader {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t pos;
};

void png_mem_read(png_structp png, png_bytep out, png_size_t count) {
  auto* r = static_cast<MemReader*>(png_get_io_ptr(png));
  if (r->pos + count > r->size) png_error(png, "read past end of buffer");
  std::memcpy(out, r->data + r->pos, count);
  r->pos += count;
}

void png_mem_write(png_structp png, png_bytep in, png_size_t count) {
  auto* out = static_cast<Bytes*>(png_get_io_ptr(png));
  out->insert(out->end(), in, in + count);
}

void png_mem_flush(png_structp) {}

void png_silent_warning(png_structp, png_const_charp) {}

enum class PngTarget { kRgb, kLabel };

struct PngDecodeResult {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<png_bytep> rows;
  char error[128] = {0};
};

// Only trivially-destructible locals live between setjmp and any longjmp.
bool png_decode_into(std::span<const std::uint8_t> bytes, PngTarget target,
                     PngDecodeResult* result) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr,
                                           png_silent_warning);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    return false;
  }
  MemReader reader{bytes.data(), bytes.size(), 0};
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    if (!result->error[0]) std::snprintf(result->error, sizeof(result->error), "corrupt PNG");
    return false;
  }
  png_set_read_fn(png, &reader, png_mem_read);
  png_read_info(png, info);
  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  int channels = 0;
  if (target == PngTarget::kLabel) {
    if (color != PNG_COLOR_TYPE_PALETTE && color != PNG_COLOR_TYPE_GRAY) {
      std::snprintf(result->error, sizeof(result->error),
                    "label PNG must be palette or grayscale");
      png_longjmp(png, 1);
    }
    if (depth > 8) {
      std::snprintf(result->error, sizeof(result->error), "label PNG must be <= 8-bit");
      png_longjmp(png, 1);
    }
    if (depth < 8) png_set_packing(png);
    channels = 1;
  } else {
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
      png_set_gray_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (depth == 16) png_set_strip_16(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) {
      png_set_tRNS_to_alpha(png);
      png_set_strip_alpha(png);
    }
    channels = 3;
  }
  png_read_update_info(png, info);
  if (png_get_rowbytes(png, info) != static_cast<png_size_t>(w) * channels) {
    std::snprintf(result->error, sizeof(result->error), "unsupported PNG layout");
    png_longjmp(png, 1);
  }
  result->width = static_cast<int>(w);
  result->height = static_cast<int>(h);
  result->pixels.resize(static_cast<std::size_t>(w) * h * channels);
  result->rows.resize(h);
  for (png_uint_32 y = 0; y < h; ++y)
    result->rows[y] = result->pixels.data() + static_cast<std::size_t>(y) * w * channels;
  png_read_image(png, result->rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

struct PngEncodeSpec {
  int width;
  int height;
  int color_type;
  const std::uint8_t* pixels;
  int channels;
  bool palette;
};

bool png_encode_into(const PngEncodeSpec& spec, Bytes* out, std::vector<png_bytep>* rows) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr,
                                            png_silent_warning);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_set_write_fn(png, out, png_mem_write, png_mem_flush);
  png_set_IHDR(png, info, static_cast<png_uint_32>(spec.width),
               static_cast<png_uint_32>(spec.height), 8, spec.color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_color palette[256];
  if (spec.palette) {
    // Fixed palette: 0 black, then distinct colours for the first labels,
    // grey ramp elsewhere. Pixel values remain the labels themselves.
    static const png_color kBase[] = {{0, 0, 0},       {230, 180, 30},  {220, 40, 40},
                                      {40, 120, 220},  {60, 200, 90},   {180, 60, 200},
                                      {30, 200, 200},  {240, 120, 160}};
    for (int i = 0; i < 256; ++i) {
      if (i < 8) {
        palette[i] = kBase[i];
      } else {
        const auto g = static_cast<png_byte>(i);
        palette[i] = {g, g, g};
      }
    }
    png_set_PLTE(png, info, palette, 256);
  }
  png_write_info(png, info);
  rows->resize(static_cast<std::size_t>(spec.height));
  for (int y = 0; y < spec.height; ++y)
    (*rows)[static_cast<std::size_t>(y)] = const_cast<png_bytep>(
        spec.pixels + static_cast<std::size_t>(y) * spec.width * spec.channels);
  png_write_image(png, rows->data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

Bytes encode_png(const PngEncodeSpec& spec) {
  if (spec.width < 1 || spec.height < 1) throw ValidationError("cannot encode empty image");
  Bytes out;
  std::vector<png_bytep> rows;
  if (!png_encode_into(spec, &out, &rows)) throw IoError("PNG encoding failed");
  return out;
}

struct JpegErrorMgr {
  jpeg_error_mgr base;
  std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
  std::longjmp(err->jump, 1);
}

struct JpegDecodeResult {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;
};

bool jpeg_decode_into(std::span<const std::uint8_t> bytes, JpegDecodeResult* result) {
  jpeg_decompress_struct cinfo;
  JpegErrorMgr err;
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    return false;
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, const_cast<unsigned char*>(bytes.data()),
               static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  result->width = static_cast<int>(cinfo.output_width);
  result->height = static_cast<int>(cinfo.output_height);
  result->pixels.resize(static_cast<std::size_t>(result->width) * result->height * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = result->pixels.data() +
                   static_cast<std::size_t>(cinfo.output_scanline) * result->width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return true;
}

bool has_png_signature(std::span<const std::uint8_t> b) {
  return b.size() >= 8 && png_sig_cmp(b.data(), 0, 8) == 0;
}

bool has_jpeg_signature(std::span<const std::uint8_t> b) {
  return b.size() >= 3 && b[0] == 0xFF && b[1] == 0xD8 && b[2] == 0xFF;
}

}  // namespace

RgbImage decode_image(std::span<const std::uint8_t> bytes) {
  RgbImage img;
  if (has_png_signature(bytes)) {
    PngDecodeResult r;
    if (!png_decode_into(bytes, PngTarget::kRgb, &r))
      throw IntegrityError(std::string("image decode failed: ") + r.error);
    img.width = r.width;
    img.height = r.height;
    img.pixels = std::move(r.pixels);
  } else if (has_jpeg_signature(bytes)) {
    JpegDecodeResult r;
    if (!jpeg_decode_into(bytes, &r)) throw IntegrityError("JPEG decode failed");
    img.width = r.width;
    img.height = r.height;
    img.pixels = std::move(r.pixels);
  } else {
    throw IntegrityError("unrecognized image format");
  }
  if (img.width < 1 || img.height < 1) throw IntegrityError("image has zero size");
  return img;
}

Bytes read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  Bytes bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return bytes;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed: " + path.string() + ": " + ec.message());
}

RgbImage read_image(const std::filesystem::path& path) {
  const Bytes bytes = read_file_bytes(path);
  try {
    return decode_image(bytes);
  } catch (const IntegrityError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

Bytes encode_rgb_png(const RgbImage& img) {
  return encode_png({img.width, img.height, PNG_COLOR_TYPE_RGB, img.pixels.data(), 3, false});
}

void write_rgb_png(const std::filesystem::path& path, const RgbImage& img) {
  write_file_atomic(path, encode_rgb_png(img));
}

Bytes encode_label_png(const LabelGrid& labels) {
  return encode_png(
      {labels.width, labels.height, PNG_COLOR_TYPE_PALETTE, labels.values.data(), 1, true});
}

LabelGrid decode_label_png(std::span<const std::uint8_t> bytes) {
  if (!has_png_signature(bytes)) throw IntegrityError("not a PNG file");
  PngDecodeResult r;
  if (!png_decode_into(bytes, PngTarget::kLabel, &r))
    throw IntegrityError(std::string("label PNG decode failed: ") + r.error);
  LabelGrid g;
  g.width = r.width;
  g.height = r.height;
  g.values = std::move(r.pixels);
  return g;
}

LabelGrid read_label_png(const std::filesystem::path& path) {
  const Bytes bytes = read_file_bytes(path);
  try {
    return decode_label_png(bytes);
  } catch (const IntegrityError& e) {
    throw IntegrityError(path.string() + ": " + e.what());
  }
}

void write_label_png(const std::filesystem::path& path, const LabelGrid& labels) {
  write_file_atomic(path, encode_label_png(labels));
}

Bytes encode_gray_png(const Grid<std::uint8_t>& gray) {
  return encode_png({gray.width, gray.height, PNG_COLOR_TYPE_GRAY, gray.values.data(), 1, false});
}

void write_gray_png(const std::filesystem::path& path, const Grid<std::uint8_t>& gray) {
  write_file_atomic(path, encode_gray_png(gray));
}

LabelGrid resize_nearest(const LabelGrid& src, int width, int height) {
  if (src.width == width && src.height == height) return src;
  LabelGrid out(width, height);
  for (int y = 0; y < height; ++y) {
    const int sy = std::min(src.height - 1,
                            static_cast<int>(std::floor((y + 0.5) * src.height / height)));
    for (int x = 0; x < width; ++x) {
      const int sx =
          std::min(src.width - 1, static_cast<int>(std::floor((x + 0.5) * src.width / width)));
      out(x, y) = src(sx, sy);
    }
  }
  return out;
}

RgbImage resize_bilinear(const RgbImage& src, int width, int height) {
  if (src.width == width && src.height == height) return src;
  RgbImage out(width, height);
  const double sx = static_cast<double>(src.width) / width;
  const double sy = static_cast<double>(src.height) / height;
  for (int y = 0; y < height; ++y) {
    const double fy = std::max(0.0, (y + 0.5) * sy - 0.5);
    const int y0 = std::min(static_cast<int>(fy), src.height - 1);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double ly = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::max(0.0, (x + 0.5) * sx - 0.5);
      const int x0 = std::min(static_cast<int>(fx), src.width - 1);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double lx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double v = (1 - ly) * ((1 - lx) * src.at(x0, y0)[c] + lx * src.at(x1, y0)[c]) +
                         ly * ((1 - lx) * src.at(x0, y1)[c] + lx * src.at(x1, y1)[c]);
        out.at(x, y)[c] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return out;
}

RgbImage flip_horizontal(const RgbImage& img) {
  RgbImage out(img.width, img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      std::memcpy(out.at(img.width - 1 - x, y), img.at(x, y), 3);
  return out;
}

LabelGrid flip_horizontal(const LabelGrid& grid) {
  LabelGrid out(grid.width, grid.height);
  for (int y = 0; y < grid.height; ++y)
    for (int x = 0; x < grid.width; ++x) out(grid.width - 1 - x, y) = grid(x, y);
  return out;
}

}  // namespace b2p
