#include "ddh/roi.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "ddh/error.hpp"
#include "ddh/evaluation.hpp"
#include "ddh/image_io.hpp"

namespace ddh {

namespace {

constexpr double kDegenerate = 1e-6;

Point2 operator-(Point2 a, Point2 b) { return {a.x - b.x, a.y - b.y}; }
Point2 operator+(Point2 a, Point2 b) { return {a.x + b.x, a.y + b.y}; }
Point2 operator*(double k, Point2 a) { return {k * a.x, k * a.y}; }
double dot(Point2 a, Point2 b) { return a.x * b.x + a.y * b.y; }
double norm(Point2 a) { return std::hypot(a.x, a.y); }

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool parse_double(const std::string& s, double& out) {
  const std::string t = trim(s);
  if (t.empty()) return false;
  char* end = nullptr;
  out = std::strtod(t.c_str(), &end);
  return end == t.c_str() + t.size();
}

}  // namespace

std::string to_string(AxisMode m) { return m == AxisMode::p3_p9 ? "p3_p9" : "perpendicular"; }

AxisMode axis_mode_from_string(const std::string& s) {
  if (s == "p3_p9") return AxisMode::p3_p9;
  if (s == "perpendicular") return AxisMode::perpendicular;
  throw ConfigError("unknown axis mode '" + s + "' (expected p3_p9 or perpendicular)");
}

std::vector<std::string> validate_keypoints(std::span<const Point2> pts) {
  std::vector<std::string> findings;
  if (pts.size() != kKeypointCount) {
    findings.emplace_back("count");
    return findings;
  }
  if (!std::all_of(pts.begin(), pts.end(), [](Point2 p) { return std::isfinite(p.x) && std::isfinite(p.y); })) {
    findings.emplace_back("non-finite");
    return findings;
  }
  if (norm(pts[12] - pts[0]) < kDegenerate) findings.emplace_back("degenerate length");
  if (norm(pts[9] - pts[3]) < kDegenerate) findings.emplace_back("degenerate axis");
  return findings;
}

RoiFrame roi_frame(std::span<const Point2> pts, AxisMode mode) {
  const auto findings = validate_keypoints(pts);
  if (!findings.empty()) {
    std::string msg = "invalid keypoints:";
    for (const auto& f : findings) msg += " " + f;
    throw GeometryError(msg);
  }
  const Point2 axis = pts[9] - pts[3];
  Point2 u = (1.0 / norm(axis)) * axis;
  if (mode == AxisMode::perpendicular) u = {-u.y, u.x};
  Point2 n{-u.y, u.x};

  Point2 centroid;
  for (const auto& p : pts) centroid = centroid + p;
  centroid = (1.0 / static_cast<double>(pts.size())) * centroid;
  const double length = norm(pts[12] - pts[0]);
  const double side_ward = dot(n, centroid - pts[6]);
  if (std::abs(side_ward) <= 1e-12 * std::max(1.0, length)) {
    throw GeometryError("keypoint centroid lies on the ROI axis through P6; palm side is undefined");
  }
  if (side_ward < 0.0) n = -1.0 * n;
  return {pts[6] + (2.0 * length / 5.0) * n, u, n, 3.0 * length / 5.0};
}

Tensor extract_roi(const Tensor& image, const RoiFrame& frame, std::size_t out_size, bool zero_pad) {
  if (image.rank() != 2) throw InputError("expected an H x W image, got " + shape_string(image.shape()));
  if (out_size == 0) throw InputError("ROI size must be positive");
  if (!(frame.side > 0.0)) throw GeometryError("ROI side must be positive");
  const double w = static_cast<double>(image.dim(1)), h = static_cast<double>(image.dim(0));
  constexpr double tol = 1e-9;
  auto inside = [&](Point2 p) { return p.x >= -tol && p.y >= -tol && p.x <= w + tol && p.y <= h + tol; };
  if (!zero_pad) {
    const double half = frame.side / 2.0;
    for (double a : {-half, half}) {
      for (double b : {-half, half}) {
        const Point2 corner = frame.center + a * frame.u + b * frame.n;
        if (!inside(corner)) {
          std::ostringstream os;
          os << "ROI corner (" << corner.x << ", " << corner.y << ") lies outside the " << image.dim(1) << "x"
             << image.dim(0) << " image";
          throw BoundsError(os.str());
        }
      }
    }
  }
  const double out = static_cast<double>(out_size);
  Tensor roi({out_size, out_size});
  for (std::size_t r = 0; r < out_size; ++r) {
    const double b = (static_cast<double>(r) + 0.5) / out - 0.5;
    for (std::size_t c = 0; c < out_size; ++c) {
      const double a = (static_cast<double>(c) + 0.5) / out - 0.5;
      const Point2 p = frame.center + (a * frame.side) * frame.u + (b * frame.side) * frame.n;
      const double v = inside(p) ? sample_bilinear(image, p.x, p.y) : 0.0;
      roi.at(r, c) = std::clamp(v, 0.0, 1.0);
    }
  }
  return roi;
}

Tensor extract_roi(const Tensor& image, std::span<const Point2> pts, const RoiOptions& options) {
  return extract_roi(image, roi_frame(pts, options.axis), options.out_size, options.zero_pad);
}

std::vector<KeypointRecord> read_keypoint_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open keypoint file " + path.string());
  std::vector<KeypointRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    auto where = [&] { return path.string() + ":" + std::to_string(line_no); };
    if (fields.size() != 1 + 2 * kKeypointCount) {
      if (records.empty() && line_no == 1) {
        double probe;
        if (fields.size() > 1 && !parse_double(fields[1], probe)) continue;  // header
      }
      throw DataError(where() + ": expected " + std::to_string(1 + 2 * kKeypointCount) + " fields, got " +
                      std::to_string(fields.size()));
    }
    KeypointRecord rec{trim(fields[0]), {}};
    bool numeric = true;
    for (std::size_t k = 0; k < kKeypointCount && numeric; ++k) {
      Point2 p;
      numeric = parse_double(fields[1 + 2 * k], p.x) && parse_double(fields[2 + 2 * k], p.y);
      rec.points.push_back(p);
    }
    if (!numeric) {
      if (records.empty() && line_no == 1) continue;  // header
      throw DataError(where() + ": non-numeric coordinate");
    }
    records.push_back(std::move(rec));
  }
  return records;
}

void write_keypoint_csv(const std::vector<KeypointRecord>& records, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "image_path";
  for (std::size_t k = 0; k < kKeypointCount; ++k) os << ",x" << k << ",y" << k;
  os << '\n';
  for (const auto& rec : records) {
    if (rec.points.size() != kKeypointCount) throw InputError("keypoint record for " + rec.image_path + " needs 14 points");
    os << rec.image_path;
    for (const auto& p : rec.points) os << ',' << format_real(p.x) << ',' << format_real(p.y);
    os << '\n';
  }
  if (!os.flush()) throw IoError("failed writing " + path.string());
}

}  // namespace ddh
