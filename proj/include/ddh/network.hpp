#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "ddh/objective.hpp"
#include "ddh/tensor.hpp"

namespace ddh {

enum class Activation { relu, tanh, linear };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

// 2-D convolution with "same" zero padding: output extent is ceil(in / stride).
struct ConvLayer {
  std::size_t kernel_h = 3;
  std::size_t kernel_w = 3;
  std::size_t channels = 16;
  std::size_t stride = 1;
};

// Non-overlapping max pooling (stride equals window); trailing rows/cols that
// do not fill a window are dropped.
struct MaxPoolLayer {
  std::size_t window = 2;
};

// Fully connected layer over the flattened input. `in_features` of 0 means
// "whatever the previous layer produces"; a nonzero value is checked.
struct DenseLayer {
  std::size_t width = 128;
  std::size_t in_features = 0;
};

struct ActivationLayer {
  Activation fn = Activation::linear;
};

using LayerSpec = std::variant<ConvLayer, MaxPoolLayer, DenseLayer, ActivationLayer>;

struct NetworkSpec {
  std::size_t input_height = 64;
  std::size_t input_width = 64;
  std::size_t input_channels = 1;
  std::vector<LayerSpec> layers;
  std::size_t code_width = 128;

  Shape input_shape(std::size_t batch) const {
    return {batch, input_height, input_width, input_channels};
  }

  // Throws SpecError when the layer chain is not shape-compatible or the last
  // layer does not produce `code_width` features.
  void validate() const;

  // Per-sample output shape after each layer (HWC for spatial layers, {D}
  // after flattening).
  std::vector<Shape> layer_shapes() const;

  std::string describe() const;

  // Heavy hashing network: four conv/pool blocks, FC512, linear code layer.
  // `first_stride` applies to the first convolution only.
  static NetworkSpec teacher(std::size_t input_size = 64, std::size_t code_width = 128, std::size_t first_stride = 1);
  // Light hashing network: two conv/pool blocks and three FC layers, the last
  // of which is the linear code layer.
  static NetworkSpec student(std::size_t input_size = 64, std::size_t code_width = 128, std::size_t first_stride = 1);

  friend bool operator==(const NetworkSpec&, const NetworkSpec&);
};

bool operator==(const ConvLayer&, const ConvLayer&);
bool operator==(const MaxPoolLayer&, const MaxPoolLayer&);
bool operator==(const DenseLayer&, const DenseLayer&);
bool operator==(const ActivationLayer&, const ActivationLayer&);

struct Parameter {
  std::string name;
  Tensor value;
};

class Network {
 public:
  Network(NetworkSpec spec, std::vector<Parameter> params, std::uint64_t seed);

  const NetworkSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  Parameter& parameter(const std::string& name);
  const Parameter& parameter(const std::string& name) const;

  std::size_t parameter_count() const;

  // FNV-1a over the raw parameter bytes; used to assert a network was not
  // modified.
  std::uint64_t checksum() const;

  friend bool operator==(const Network& a, const Network& b);

 private:
  NetworkSpec spec_;
  std::vector<Parameter> params_;
  std::uint64_t seed_;
};

// Glorot-uniform weights, zero biases, fully determined by (spec, seed).
Network build_network(const NetworkSpec& spec, std::uint64_t seed);

// Gradients in the same order as Network::parameters().
struct Gradients {
  std::vector<Tensor> tensors;
};

namespace detail {
struct LayerCache;
}

// Scalar type of the matrix products. Parameters, activations and gradients
// are always stored as double; f32 rounds GEMM operands to float, which is
// roughly 3x faster on CPUs with wide SIMD. Gradient checks use f64.
enum class Precision { f64, f32 };

std::string to_string(Precision p);
Precision precision_from_string(const std::string& s);

// Activations and scratch buffers of one forward evaluation. A ForwardPass can
// be reused across calls; buffers keep their allocation.
class ForwardPass {
 public:
  ForwardPass();
  ForwardPass(ForwardPass&&) noexcept;
  ForwardPass& operator=(ForwardPass&&) noexcept;
  ~ForwardPass();

  const Tensor& output() const { return output_; }

  // Smallest distance of any ReLU pre-activation from zero or any max-pool
  // winner from its runner-up. Finite-difference checks reject instances where
  // this is small because the network is not differentiable there.
  // Margins cost an extra sweep over every activation, so they are only
  // computed when enabled.
  double min_kink_margin() const;
  void set_track_margins(bool on) { track_margins_ = on; }
  void set_precision(Precision p) { precision_ = p; }
  Precision precision() const { return precision_; }

 private:
  friend void forward_recording(const Network&, const Tensor&, ForwardPass&);
  friend void backward(const Network&, ForwardPass&, const Tensor&, Gradients&);
  friend Tensor forward(const Network&, const Tensor&, Precision);

  Tensor input_;
  Tensor output_;
  std::vector<std::unique_ptr<detail::LayerCache>> caches_;
  Tensor grad_a_, grad_b_;
  bool track_margins_ = false;
  Precision precision_ = Precision::f64;
  Precision recorded_precision_ = Precision::f64;
};

// batch: N x H x W x C. Returns N x code_width.
Tensor forward(const Network& net, const Tensor& batch, Precision precision = Precision::f64);

void forward_recording(const Network& net, const Tensor& batch, ForwardPass& pass);
ForwardPass forward_recording(const Network& net, const Tensor& batch);

// `grads` is resized to match the parameters; its storage is reused.
void backward(const Network& net, ForwardPass& pass, const Tensor& output_grad, Gradients& grads);
Gradients backward(const Network& net, ForwardPass& pass, const Tensor& output_grad);

using FeatureObjective = std::function<LossEval(const Tensor& features)>;

struct GradientResult {
  double loss = 0.0;
  Gradients grads;
};

// Reverse-mode gradient of objective(forward(net, batch)) w.r.t. every
// parameter of `net`.
GradientResult gradients(const Network& net, const Tensor& batch, const FeatureObjective& objective);

// Same, reusing `pass` and `result` storage across calls (training loops).
void gradients(const Network& net, const Tensor& batch, const FeatureObjective& objective, ForwardPass& pass,
               GradientResult& result);

}  // namespace ddh
