#include "ddh/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ddh/error.hpp"

namespace ddh {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  for (auto e : shape_) {
    if (e == 0) throw InputError("tensor extents must be positive: " + shape_string(shape_));
  }
  values_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  for (auto e : shape_) {
    if (e == 0) throw InputError("tensor extents must be positive: " + shape_string(shape_));
  }
  if (values_.size() != shape_size(shape_)) {
    throw InputError("tensor value count " + std::to_string(values_.size()) +
                     " does not match shape " + shape_string(shape_));
  }
}

std::span<const double> Tensor::row(std::size_t r) const {
  const std::size_t width = size() / shape_[0];
  return std::span<const double>(values_).subspan(r * width, width);
}

std::span<double> Tensor::row(std::size_t r) {
  const std::size_t width = size() / shape_[0];
  return std::span<double>(values_).subspan(r * width, width);
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != size()) {
    throw InputError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), values_);
}

void Tensor::resize(Shape shape) {
  for (auto e : shape) {
    if (e == 0) throw InputError("tensor extents must be positive: " + shape_string(shape));
  }
  values_.resize(shape_size(shape));
  shape_ = std::move(shape);
}

void Tensor::fill(double v) { std::fill(values_.begin(), values_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace ddh
