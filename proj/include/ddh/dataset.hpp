#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ddh/losses.hpp"
#include "ddh/tensor.hpp"

namespace ddh {

struct DatasetItem {
  Tensor image;              // H x W, values in [0, 1]
  std::size_t class_index;   // into Dataset::class_names()
  std::string source_path;   // empty for generated items
};

class Dataset {
 public:
  Dataset() = default;
  explicit Dataset(std::vector<std::string> class_names);

  // Adds an item; the image must match the shape of earlier items.
  void add(Tensor image, std::size_t class_index, std::string source_path = {});

  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  std::size_t num_classes() const { return class_names_.size(); }
  const std::vector<std::string>& class_names() const { return class_names_; }
  const std::vector<DatasetItem>& items() const { return items_; }
  const DatasetItem& item(std::size_t i) const { return items_.at(i); }
  const std::string& label(std::size_t i) const { return class_names_.at(items_.at(i).class_index); }
  std::size_t height() const;
  std::size_t width() const;

  // Item indices per class, in dataset order.
  std::vector<std::vector<std::size_t>> members_by_class() const;

  // N x H x W x 1 network input for the given items.
  Tensor batch(std::span<const std::size_t> indices) const;
  Tensor batch(std::size_t first, std::size_t count) const;

 private:
  std::vector<std::string> class_names_;
  std::vector<DatasetItem> items_;
};

// root/<class_label>/<image>, classes and files in lexicographic order.
// Images are resized to height x width.
Dataset load_dataset(const std::filesystem::path& root, std::size_t height = 64, std::size_t width = 64);

// Writes root/<class_label>/<NNNN>.png; returns the number of files written.
std::size_t export_dataset(const Dataset& ds, const std::filesystem::path& root);

// Per-sample variation of the synthetic generator.
struct SyntheticOptions {
  double max_rotation = 0.10;     // radians
  double max_shift = 0.06;        // fraction of the image side
  double max_scale = 0.06;        // relative
  double noise_sigma = 0.05;
  double min_gain = 0.8;
  double max_gain = 1.2;
};

// Per class: 3-5 dark line strokes over an oriented sinusoidal ridge
// texture. Per sample: affine jitter, illumination gain, Gaussian noise.
Dataset gen_synthetic(std::size_t num_classes, std::size_t per_class, std::size_t image_size, std::uint64_t seed,
                      const SyntheticOptions& options = {});

struct SplitSpec {
  double train_fraction = 0.5;
  std::uint64_t seed = 0;
  // When nonzero, exactly this many items per class go to train and the
  // fraction is ignored.
  std::size_t train_count = 0;
};

struct Split {
  Dataset train;
  Dataset test;
};

// floor(fraction * n) items of each class (or train_count) go to train, the
// rest to test. Membership is drawn per class from the seed; both halves keep
// dataset order.
Split split(const Dataset& ds, const SplitSpec& spec);

struct PairBatch {
  Tensor images;                     // (k*m) x H x W x 1
  std::vector<std::size_t> indices;  // into the source dataset
  PairLabels labels;
};

// k distinct classes, m distinct items each; a pure function of
// (dataset, k, m, seed, step).
PairBatch sample_pair_batch(const Dataset& train, std::size_t k_classes, std::size_t m_per_class,
                            std::uint64_t seed, std::uint64_t step);

}  // namespace ddh
