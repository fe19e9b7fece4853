#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ddh/tensor.hpp"

namespace ddh {

// Pixel coordinates: origin top-left, x right, y down.
struct Point2 {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point2&, const Point2&) = default;
};

constexpr std::size_t kKeypointCount = 14;

// Which direction the square's first axis follows.
//   p3_p9         u runs from P3 to P9
//   perpendicular u is P3->P9 rotated by +90 degrees
enum class AxisMode { p3_p9, perpendicular };

std::string to_string(AxisMode m);
AxisMode axis_mode_from_string(const std::string& s);

struct RoiFrame {
  Point2 center;
  Point2 u;  // unit axis
  Point2 n;  // unit normal, towards the palm
  double side = 0.0;
};

// Empty when the set is usable. Findings: "count", "non-finite",
// "degenerate length" (P0 == P12), "degenerate axis" (P3 == P9).
std::vector<std::string> validate_keypoints(std::span<const Point2> pts);

// Square of side 3L/5 whose centre lies 2L/5 from P6 along the palm-ward
// normal, L = |P0 P12|.
RoiFrame roi_frame(std::span<const Point2> pts, AxisMode mode = AxisMode::p3_p9);

struct RoiOptions {
  std::size_t out_size = 128;
  bool zero_pad = false;
  AxisMode axis = AxisMode::p3_p9;
};

// Output pixel (r, c) samples center + a*s*u + b*s*n with
// a = (c+0.5)/out - 0.5 and b = (r+0.5)/out - 0.5. Without zero padding a
// square reaching outside the image raises BoundsError.
Tensor extract_roi(const Tensor& image, const RoiFrame& frame, std::size_t out_size = 128, bool zero_pad = false);
Tensor extract_roi(const Tensor& image, std::span<const Point2> pts, const RoiOptions& options = {});

// One row per image: image_path, x0, y0, ..., x13, y13. A leading header row
// and blank lines are skipped.
struct KeypointRecord {
  std::string image_path;
  std::vector<Point2> points;
};

std::vector<KeypointRecord> read_keypoint_csv(const std::filesystem::path& path);
void write_keypoint_csv(const std::vector<KeypointRecord>& records, const std::filesystem::path& path);

}  // namespace ddh
