#pragma once

#include <cstddef>
#include <filesystem>

#include "ddh/tensor.hpp"

namespace ddh {

// Grayscale images are H x W tensors with values in [0, 1].

// 8-bit PNG (gray, gray+alpha, RGB, RGBA, palette) or uncompressed BMP
// (8/24/32-bit). Colour is reduced with luminance weights 0.299/0.587/0.114.
// Failures raise DataError naming the file.
Tensor read_image(const std::filesystem::path& path);

// 8-bit grayscale PNG; values are clamped to [0, 1] and rounded.
void write_png(const Tensor& image, const std::filesystem::path& path);

// Bilinear resampling with pixel centres at i + 0.5.
Tensor resize_bilinear(const Tensor& image, std::size_t height, std::size_t width);

// Bilinear sample at continuous coordinates (x, y), where pixel (r, c)
// covers [c, c+1) x [r, r+1). Neighbours are clamped at the border.
double sample_bilinear(const Tensor& image, double x, double y);

}  // namespace ddh
