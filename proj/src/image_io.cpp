#include "ddh/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <memory>
#include <vector>

#include "ddh/error.hpp"

namespace ddh {

namespace {

double luminance(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

struct PngErrorContext {
  std::string message;
};

[[noreturn]] void png_error_fn(png_structp png, png_const_charp msg) {
  auto* ctx = static_cast<PngErrorContext*>(png_get_error_ptr(png));
  if (ctx) ctx->message = msg;
  png_longjmp(png, 1);
}

void png_warning_fn(png_structp, png_const_charp) {}

bool has_png_signature(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  unsigned char sig[8] = {};
  if (!is.read(reinterpret_cast<char*>(sig), 8)) return false;
  return png_sig_cmp(sig, 0, 8) == 0;
}

Tensor read_png(const std::filesystem::path& path) {
  File file(std::fopen(path.c_str(), "rb"));
  if (!file) throw DataError("cannot open image " + path.string());
  PngErrorContext ctx;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &ctx, png_error_fn, png_warning_fn);
  if (!png) throw DataError("cannot decode " + path.string());
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw DataError("cannot decode " + path.string());
  }
  std::vector<png_byte> pixels;
  std::vector<png_bytep> rows;
  png_uint_32 width = 0, height = 0;
  int channels = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("cannot decode " + path.string() + ": " + ctx.message);
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  width = png_get_image_width(png, info);
  height = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  channels = png_get_channels(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  pixels.resize(stride * height);
  rows.resize(height);
  for (png_uint_32 y = 0; y < height; ++y) rows[y] = pixels.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  if (width == 0 || height == 0) throw DataError("empty image " + path.string());
  Tensor img({height, width});
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const png_byte* p = rows[y] + x * static_cast<std::size_t>(channels);
      img.at(y, x) = channels >= 3 ? luminance(p[0] / 255.0, p[1] / 255.0, p[2] / 255.0) : p[0] / 255.0;
    }
  }
  return img;
}

std::uint32_t le32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t le16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

Tensor read_bmp(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open image " + path.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  auto fail = [&](const std::string& why) -> DataError { return DataError("cannot decode " + path.string() + ": " + why); };
  if (buf.size() < 54 || buf[0] != 'B' || buf[1] != 'M') throw fail("not a BMP file");
  const std::uint32_t offset = le32(&buf[10]);
  const std::uint32_t header = le32(&buf[14]);
  if (header < 40) throw fail("unsupported BMP header");
  const auto raw_w = static_cast<std::int32_t>(le32(&buf[18]));
  const auto raw_h = static_cast<std::int32_t>(le32(&buf[22]));
  const std::uint16_t bpp = le16(&buf[28]);
  const std::uint32_t compression = le32(&buf[30]);
  // BI_RGB, or BI_BITFIELDS for 32-bit with the standard BGRA masks.
  if (compression != 0 && !(compression == 3 && bpp == 32)) throw fail("compressed BMP not supported");
  if (bpp != 8 && bpp != 24 && bpp != 32) throw fail("unsupported bit depth " + std::to_string(bpp));
  if (raw_w <= 0 || raw_h == 0) throw fail("invalid dimensions");
  const bool top_down = raw_h < 0;
  const std::size_t w = static_cast<std::size_t>(raw_w);
  const std::size_t h = static_cast<std::size_t>(top_down ? -static_cast<std::int64_t>(raw_h) : raw_h);
  const std::size_t stride = (w * bpp / 8 + 3) & ~static_cast<std::size_t>(3);
  if (offset > buf.size() || stride * h > buf.size() - offset) throw fail("truncated pixel data");

  std::array<double, 256> palette{};
  if (bpp == 8) {
    std::uint32_t colours = le32(&buf[46]);
    if (colours == 0) colours = 256;
    const std::size_t table = 14 + header;
    if (colours > 256 || table + 4 * colours > offset) throw fail("bad palette");
    for (std::uint32_t i = 0; i < colours; ++i) {
      const unsigned char* e = &buf[table + 4 * i];
      palette[i] = luminance(e[2] / 255.0, e[1] / 255.0, e[0] / 255.0);
    }
  }
  Tensor img({h, w});
  for (std::size_t row = 0; row < h; ++row) {
    const unsigned char* src = &buf[offset + row * stride];
    const std::size_t y = top_down ? row : h - 1 - row;
    for (std::size_t x = 0; x < w; ++x) {
      if (bpp == 8) {
        img.at(y, x) = palette[src[x]];
      } else {
        const unsigned char* p = src + x * (bpp / 8);
        img.at(y, x) = luminance(p[2] / 255.0, p[1] / 255.0, p[0] / 255.0);
      }
    }
  }
  return img;
}

void require_image(const Tensor& image) {
  if (image.rank() != 2) throw InputError("expected an H x W image, got " + shape_string(image.shape()));
}

}  // namespace

Tensor read_image(const std::filesystem::path& path) {
  if (has_png_signature(path)) return read_png(path);
  std::ifstream is(path, std::ios::binary);
  char magic[2] = {};
  if (is.read(magic, 2) && magic[0] == 'B' && magic[1] == 'M') return read_bmp(path);
  if (!std::filesystem::exists(path)) throw DataError("cannot open image " + path.string());
  throw DataError("cannot decode " + path.string() + ": not a PNG or BMP file");
}

void write_png(const Tensor& image, const std::filesystem::path& path) {
  require_image(image);
  const std::size_t h = image.dim(0), w = image.dim(1);
  std::vector<png_byte> pixels(h * w);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const double v = std::clamp(image[i], 0.0, 1.0);
    pixels[i] = static_cast<png_byte>(std::lround(v * 255.0));
  }
  File file(std::fopen(path.c_str(), "wb"));
  if (!file) throw IoError("cannot open " + path.string() + " for writing");
  PngErrorContext ctx;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &ctx, png_error_fn, png_warning_fn);
  if (!png) throw IoError("cannot encode " + path.string());
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("cannot encode " + path.string());
  }
  std::vector<png_bytep> rows(h);
  for (std::size_t y = 0; y < h; ++y) rows[y] = pixels.data() + y * w;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("cannot encode " + path.string() + ": " + ctx.message);
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fflush(file.get()) != 0) throw IoError("failed writing " + path.string());
}

double sample_bilinear(const Tensor& image, double x, double y) {
  const auto h = static_cast<std::ptrdiff_t>(image.dim(0));
  const auto w = static_cast<std::ptrdiff_t>(image.dim(1));
  const double fx = x - 0.5, fy = y - 0.5;
  const double x0f = std::floor(fx), y0f = std::floor(fy);
  const double ax = fx - x0f, ay = fy - y0f;
  auto clamp_x = [&](double v) { return std::clamp(static_cast<std::ptrdiff_t>(v), std::ptrdiff_t{0}, w - 1); };
  auto clamp_y = [&](double v) { return std::clamp(static_cast<std::ptrdiff_t>(v), std::ptrdiff_t{0}, h - 1); };
  const auto x0 = static_cast<std::size_t>(clamp_x(x0f)), x1 = static_cast<std::size_t>(clamp_x(x0f + 1));
  const auto y0 = static_cast<std::size_t>(clamp_y(y0f)), y1 = static_cast<std::size_t>(clamp_y(y0f + 1));
  const double top = (1.0 - ax) * image.at(y0, x0) + ax * image.at(y0, x1);
  const double bottom = (1.0 - ax) * image.at(y1, x0) + ax * image.at(y1, x1);
  return (1.0 - ay) * top + ay * bottom;
}

Tensor resize_bilinear(const Tensor& image, std::size_t height, std::size_t width) {
  require_image(image);
  if (height == 0 || width == 0) throw InputError("resize target must be positive");
  if (image.dim(0) == height && image.dim(1) == width) return image;
  const double sy = static_cast<double>(image.dim(0)) / static_cast<double>(height);
  const double sx = static_cast<double>(image.dim(1)) / static_cast<double>(width);
  Tensor out({height, width});
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      out.at(r, c) = sample_bilinear(image, (static_cast<double>(c) + 0.5) * sx, (static_cast<double>(r) + 0.5) * sy);
    }
  }
  return out;
}

}  // namespace ddh
