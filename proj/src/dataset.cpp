#include "ddh/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "ddh/error.hpp"
#include "ddh/image_io.hpp"
#include "ddh/rng.hpp"

namespace ddh {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kTagSynthetic = 0x73796e74;
constexpr std::uint64_t kTagSplit = 0x73706c74;
constexpr std::uint64_t kTagBatch = 0x62617463;

bool is_image_file(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".bmp";
}

struct Vec2 {
  double x, y;
};

struct Stroke {
  Vec2 a, control, b;
  double width;
  double depth;
  std::vector<Vec2> polyline;
};

struct ClassTemplate {
  double ridge_angle;
  double ridge_freq;
  double ridge_phase;
  std::vector<Stroke> strokes;
};

double segment_distance_sq(Vec2 p, Vec2 a, Vec2 b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = a.x + t * dx - p.x, ey = a.y + t * dy - p.y;
  return ex * ex + ey * ey;
}

ClassTemplate make_template(Rng& rng) {
  ClassTemplate c;
  c.ridge_angle = rng.uniform(0.0, std::numbers::pi);
  c.ridge_freq = rng.uniform(3.0, 6.0);
  c.ridge_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const auto count = 3 + rng.below(3);
  for (std::uint64_t s = 0; s < count; ++s) {
    Stroke k;
    k.a = {rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8)};
    k.b = {rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8)};
    const Vec2 mid{(k.a.x + k.b.x) / 2, (k.a.y + k.b.y) / 2};
    k.control = {mid.x + rng.uniform(-0.3, 0.3), mid.y + rng.uniform(-0.3, 0.3)};
    k.width = rng.uniform(0.03, 0.06);
    k.depth = rng.uniform(0.3, 0.6);
    constexpr int kSegments = 16;
    for (int i = 0; i <= kSegments; ++i) {
      const double t = static_cast<double>(i) / kSegments;
      const double u = 1.0 - t;
      k.polyline.push_back({u * u * k.a.x + 2 * u * t * k.control.x + t * t * k.b.x,
                            u * u * k.a.y + 2 * u * t * k.control.y + t * t * k.b.y});
    }
    c.strokes.push_back(std::move(k));
  }
  return c;
}

// Template intensity at normalized coordinates in [-1, 1]^2.
double render(const ClassTemplate& c, Vec2 p) {
  const double along = p.x * std::cos(c.ridge_angle) + p.y * std::sin(c.ridge_angle);
  double v = 0.55 + 0.15 * std::sin(std::numbers::pi * c.ridge_freq * along + c.ridge_phase);
  for (const auto& s : c.strokes) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 1; i < s.polyline.size(); ++i) {
      best = std::min(best, segment_distance_sq(p, s.polyline[i - 1], s.polyline[i]));
    }
    v *= 1.0 - s.depth * std::exp(-best / (2.0 * s.width * s.width));
  }
  return v;
}

std::string class_name(std::size_t index, std::size_t count) {
  const std::size_t digits = std::max<std::size_t>(3, std::to_string(count - 1).size());
  std::string id = std::to_string(index);
  return "c" + std::string(digits - std::min(digits, id.size()), '0') + id;
}

}  // namespace

Dataset::Dataset(std::vector<std::string> class_names) : class_names_(std::move(class_names)) {}

void Dataset::add(Tensor image, std::size_t class_index, std::string source_path) {
  if (image.rank() != 2) throw InputError("dataset images must be H x W, got " + shape_string(image.shape()));
  if (class_index >= class_names_.size()) {
    throw InputError("class index " + std::to_string(class_index) + " outside the class list");
  }
  if (!items_.empty() && image.shape() != items_.front().image.shape()) {
    throw DataError("image " + (source_path.empty() ? std::to_string(items_.size()) : source_path) + " has shape " +
                    shape_string(image.shape()) + ", expected " + shape_string(items_.front().image.shape()));
  }
  items_.push_back({std::move(image), class_index, std::move(source_path)});
}

std::size_t Dataset::height() const {
  if (items_.empty()) throw StateError("empty dataset has no image size");
  return items_.front().image.dim(0);
}

std::size_t Dataset::width() const {
  if (items_.empty()) throw StateError("empty dataset has no image size");
  return items_.front().image.dim(1);
}

std::vector<std::vector<std::size_t>> Dataset::members_by_class() const {
  std::vector<std::vector<std::size_t>> members(class_names_.size());
  for (std::size_t i = 0; i < items_.size(); ++i) members[items_[i].class_index].push_back(i);
  return members;
}

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw InputError("empty batch");
  const std::size_t h = height(), w = width();
  Tensor out({indices.size(), h, w, 1});
  double* dst = out.data();
  for (auto i : indices) {
    const auto v = items_.at(i).image.values();
    dst = std::copy(v.begin(), v.end(), dst);
  }
  return out;
}

Tensor Dataset::batch(std::size_t first, std::size_t count) const {
  std::vector<std::size_t> idx(count);
  for (std::size_t k = 0; k < count; ++k) idx[k] = first + k;
  return batch(idx);
}

Dataset load_dataset(const fs::path& root, std::size_t height, std::size_t width) {
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw DataError("dataset directory " + root.string() + " does not exist");
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) class_dirs.push_back(e.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.size() < 2) throw DataError(root.string() + " must contain at least 2 class directories");
  std::vector<std::string> names;
  for (const auto& d : class_dirs) names.push_back(d.filename().string());
  Dataset ds(names);
  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(class_dirs[c])) {
      if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.size() < 2) {
      throw DataError("class " + names[c] + " has " + std::to_string(files.size()) + " images, need at least 2");
    }
    for (const auto& f : files) ds.add(resize_bilinear(read_image(f), height, width), c, f.string());
  }
  return ds;
}

std::size_t export_dataset(const Dataset& ds, const fs::path& root) {
  std::vector<std::size_t> counter(ds.num_classes(), 0);
  for (const auto& name : ds.class_names()) fs::create_directories(root / name);
  for (const auto& item : ds.items()) {
    char file[32];
    std::snprintf(file, sizeof file, "%04zu.png", counter[item.class_index]++);
    write_png(item.image, root / ds.class_names()[item.class_index] / file);
  }
  return ds.size();
}

Dataset gen_synthetic(std::size_t num_classes, std::size_t per_class, std::size_t image_size, std::uint64_t seed,
                      const SyntheticOptions& options) {
  if (num_classes < 2) throw InputError("synthetic data needs at least 2 classes");
  if (per_class < 2) throw InputError("synthetic data needs at least 2 images per class");
  if (image_size < 8) throw InputError("synthetic image size must be at least 8");
  std::vector<std::string> names;
  for (std::size_t c = 0; c < num_classes; ++c) names.push_back(class_name(c, num_classes));
  Dataset ds(names);
  const double side = static_cast<double>(image_size);
  for (std::size_t c = 0; c < num_classes; ++c) {
    Rng class_rng(derive_seed(seed, {kTagSynthetic, c}));
    const ClassTemplate tmpl = make_template(class_rng);
    for (std::size_t i = 0; i < per_class; ++i) {
      Rng rng(derive_seed(seed, {kTagSynthetic, c, i + 1}));
      const double angle = rng.uniform(-options.max_rotation, options.max_rotation);
      const double scale = 1.0 + rng.uniform(-options.max_scale, options.max_scale);
      const double tx = rng.uniform(-options.max_shift, options.max_shift) * 2.0;
      const double ty = rng.uniform(-options.max_shift, options.max_shift) * 2.0;
      const double gain = rng.uniform(options.min_gain, options.max_gain);
      const double ca = std::cos(angle) / scale, sa = std::sin(angle) / scale;
      Tensor img({image_size, image_size});
      for (std::size_t r = 0; r < image_size; ++r) {
        for (std::size_t col = 0; col < image_size; ++col) {
          // Pixel centre in [-1, 1]^2, mapped back through the jitter.
          const double x = (static_cast<double>(col) + 0.5) / side * 2.0 - 1.0 - tx;
          const double y = (static_cast<double>(r) + 0.5) / side * 2.0 - 1.0 - ty;
          const Vec2 p{ca * x + sa * y, -sa * x + ca * y};
          const double v = gain * render(tmpl, p) + options.noise_sigma * rng.normal();
          img.at(r, col) = std::clamp(v, 0.0, 1.0);
        }
      }
      ds.add(std::move(img), c);
    }
  }
  return ds;
}

Split split(const Dataset& ds, const SplitSpec& spec) {
  if (spec.train_count == 0 && !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0)) {
    throw ConfigError("train fraction must lie in (0, 1)");
  }
  Split out{Dataset(ds.class_names()), Dataset(ds.class_names())};
  std::vector<bool> to_train(ds.size(), false);
  const auto members = ds.members_by_class();
  for (std::size_t c = 0; c < members.size(); ++c) {
    const auto& m = members[c];
    const auto n_train =
        spec.train_count ? spec.train_count
                         : static_cast<std::size_t>(std::floor(spec.train_fraction * static_cast<double>(m.size())));
    if (n_train < 1 || n_train >= m.size()) {
      throw DataError("class " + ds.class_names()[c] + " with " + std::to_string(m.size()) + " items cannot give " +
                      std::to_string(n_train) + " to train and keep at least one for test");
    }
    std::vector<std::size_t> order = m;
    Rng rng(derive_seed(spec.seed, {kTagSplit, c}));
    rng.shuffle(order.begin(), order.end());
    for (std::size_t k = 0; k < n_train; ++k) to_train[order[k]] = true;
  }
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& item = ds.item(i);
    (to_train[i] ? out.train : out.test).add(item.image, item.class_index, item.source_path);
  }
  return out;
}

PairBatch sample_pair_batch(const Dataset& train, std::size_t k_classes, std::size_t m_per_class, std::uint64_t seed,
                            std::uint64_t step) {
  if (k_classes < 1 || m_per_class < 1) throw InputError("batch needs k >= 1 classes and m >= 1 items");
  const auto members = train.members_by_class();
  std::vector<std::size_t> eligible;
  for (std::size_t c = 0; c < members.size(); ++c) {
    if (members[c].size() >= m_per_class) eligible.push_back(c);
  }
  if (eligible.size() < k_classes) {
    throw DataError("training set has " + std::to_string(eligible.size()) + " classes with at least " +
                    std::to_string(m_per_class) + " items, batch needs " + std::to_string(k_classes));
  }
  Rng rng(derive_seed(seed, {kTagBatch, step}));
  // Partial Fisher-Yates: the first k entries become the chosen classes.
  for (std::size_t i = 0; i < k_classes; ++i) {
    std::swap(eligible[i], eligible[i + rng.below(eligible.size() - i)]);
  }
  PairBatch b;
  std::vector<std::size_t> classes;
  for (std::size_t i = 0; i < k_classes; ++i) {
    std::vector<std::size_t> pool = members[eligible[i]];
    for (std::size_t j = 0; j < m_per_class; ++j) {
      std::swap(pool[j], pool[j + rng.below(pool.size() - j)]);
      b.indices.push_back(pool[j]);
      classes.push_back(eligible[i]);
    }
  }
  b.images = train.batch(b.indices);
  b.labels = PairLabels(std::move(classes));
  return b;
}

}  // namespace ddh
