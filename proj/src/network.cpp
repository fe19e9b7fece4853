#include "ddh/network.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <type_traits>

#include "ddh/error.hpp"
#include "ddh/rng.hpp"

namespace ddh {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstRowVecMap = Eigen::Map<const Eigen::RowVectorXd>;

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

struct ConvGeometry {
  std::size_t out_h, out_w, pad_top, pad_left;
};

ConvGeometry conv_geometry(std::size_t h, std::size_t w, const ConvLayer& c) {
  ConvGeometry g{};
  g.out_h = ceil_div(h, c.stride);
  g.out_w = ceil_div(w, c.stride);
  const std::size_t need_h = (g.out_h - 1) * c.stride + c.kernel_h;
  const std::size_t need_w = (g.out_w - 1) * c.stride + c.kernel_w;
  g.pad_top = need_h > h ? (need_h - h) / 2 : 0;
  g.pad_left = need_w > w ? (need_w - w) / 2 : 0;
  return g;
}

std::string layer_name(const LayerSpec& l) {
  return std::visit(Overloaded{[](const ConvLayer&) { return std::string("conv"); },
                               [](const MaxPoolLayer&) { return std::string("maxpool"); },
                               [](const DenseLayer&) { return std::string("fc"); },
                               [](const ActivationLayer& a) { return to_string(a.fn); }},
                    l);
}

}  // namespace

std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu:
      return "relu";
    case Activation::tanh:
      return "tanh";
    case Activation::linear:
      return "linear";
  }
  return "linear";
}

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "linear") return Activation::linear;
  throw SpecError("unknown activation '" + s + "'");
}

bool operator==(const ConvLayer& a, const ConvLayer& b) {
  return a.kernel_h == b.kernel_h && a.kernel_w == b.kernel_w && a.channels == b.channels &&
         a.stride == b.stride;
}
bool operator==(const MaxPoolLayer& a, const MaxPoolLayer& b) { return a.window == b.window; }
bool operator==(const DenseLayer& a, const DenseLayer& b) {
  return a.width == b.width && a.in_features == b.in_features;
}
bool operator==(const ActivationLayer& a, const ActivationLayer& b) { return a.fn == b.fn; }

bool operator==(const NetworkSpec& a, const NetworkSpec& b) {
  return a.input_height == b.input_height && a.input_width == b.input_width &&
         a.input_channels == b.input_channels && a.code_width == b.code_width &&
         a.layers == b.layers;
}

std::vector<Shape> NetworkSpec::layer_shapes() const {
  if (input_height == 0 || input_width == 0 || input_channels == 0) {
    throw SpecError("input shape must have positive extents");
  }
  std::vector<Shape> shapes;
  Shape cur{input_height, input_width, input_channels};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto where = "layer " + std::to_string(i) + " (" + layer_name(layers[i]) + ")";
    std::visit(
        Overloaded{
            [&](const ConvLayer& c) {
              if (cur.size() != 3) throw SpecError(where + ": convolution after flattening");
              if (c.kernel_h == 0 || c.kernel_w == 0 || c.channels == 0 || c.stride == 0) {
                throw SpecError(where + ": conv extents must be positive");
              }
              const auto g = conv_geometry(cur[0], cur[1], c);
              cur = {g.out_h, g.out_w, c.channels};
            },
            [&](const MaxPoolLayer& p) {
              if (cur.size() != 3) throw SpecError(where + ": pooling after flattening");
              if (p.window == 0 || p.window > cur[0] || p.window > cur[1]) {
                throw SpecError(where + ": pool window " + std::to_string(p.window) +
                                " does not fit input " + shape_string(cur));
              }
              cur = {cur[0] / p.window, cur[1] / p.window, cur[2]};
            },
            [&](const DenseLayer& d) {
              if (d.width == 0) throw SpecError(where + ": width must be positive");
              const std::size_t in = shape_size(cur);
              if (d.in_features != 0 && d.in_features != in) {
                throw SpecError(where + ": expects " + std::to_string(d.in_features) +
                                " inputs but previous layer produces " + std::to_string(in));
              }
              cur = {d.width};
            },
            [&](const ActivationLayer&) {}},
        layers[i]);
    shapes.push_back(cur);
  }
  return shapes;
}

void NetworkSpec::validate() const {
  if (layers.empty()) throw SpecError("network has no layers");
  const auto shapes = layer_shapes();
  const bool has_dense =
      std::any_of(layers.begin(), layers.end(), [](const LayerSpec& l) { return std::holds_alternative<DenseLayer>(l); });
  if (!has_dense) throw SpecError("network must end in a fully connected code layer");
  const Shape& last = shapes.back();
  if (last.size() != 1 || last[0] != code_width) {
    throw SpecError("final layer produces " + shape_string(last) + " but code width is " +
                    std::to_string(code_width));
  }
}

std::string NetworkSpec::describe() const {
  std::ostringstream os;
  os << "input " << input_height << "x" << input_width << "x" << input_channels << ':';
  for (const auto& l : layers) {
    std::visit(Overloaded{[&](const ConvLayer& c) {
                            os << " conv" << c.kernel_h << "x" << c.kernel_w << "x" << c.channels;
                            if (c.stride != 1) os << "/s" << c.stride;
                          },
                          [&](const MaxPoolLayer& p) { os << " maxpool" << p.window; },
                          [&](const DenseLayer& d) { os << " fc" << d.width; },
                          [&](const ActivationLayer& a) { os << " " << to_string(a.fn); }},
               l);
  }
  os << " (code " << code_width << ")";
  return os.str();
}

NetworkSpec NetworkSpec::teacher(std::size_t input_size, std::size_t code_width, std::size_t first_stride) {
  NetworkSpec s;
  s.input_height = s.input_width = input_size;
  s.input_channels = 1;
  s.code_width = code_width;
  for (std::size_t ch : {16, 32, 64, 64}) {
    s.layers.push_back(ConvLayer{3, 3, ch, s.layers.empty() ? first_stride : 1});
    s.layers.push_back(ActivationLayer{Activation::relu});
    s.layers.push_back(MaxPoolLayer{2});
  }
  s.layers.push_back(DenseLayer{512});
  s.layers.push_back(ActivationLayer{Activation::relu});
  s.layers.push_back(DenseLayer{code_width});
  s.layers.push_back(ActivationLayer{Activation::linear});
  return s;
}

NetworkSpec NetworkSpec::student(std::size_t input_size, std::size_t code_width, std::size_t first_stride) {
  NetworkSpec s;
  s.input_height = s.input_width = input_size;
  s.input_channels = 1;
  s.code_width = code_width;
  for (std::size_t ch : {16, 32}) {
    s.layers.push_back(ConvLayer{3, 3, ch, s.layers.empty() ? first_stride : 1});
    s.layers.push_back(ActivationLayer{Activation::relu});
    s.layers.push_back(MaxPoolLayer{2});
  }
  s.layers.push_back(DenseLayer{512});
  s.layers.push_back(ActivationLayer{Activation::relu});
  s.layers.push_back(DenseLayer{256});
  s.layers.push_back(ActivationLayer{Activation::relu});
  s.layers.push_back(DenseLayer{code_width});
  s.layers.push_back(ActivationLayer{Activation::linear});
  return s;
}

// ---------------------------------------------------------------------------

Network::Network(NetworkSpec spec, std::vector<Parameter> params, std::uint64_t seed)
    : spec_(std::move(spec)), params_(std::move(params)), seed_(seed) {}

Parameter& Network::parameter(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw InputError("no parameter named '" + name + "'");
}

const Parameter& Network::parameter(const std::string& name) const {
  return const_cast<Network*>(this)->parameter(name);
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::uint64_t Network::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params_) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.value.data());
    for (std::size_t i = 0; i < p.value.size() * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

bool operator==(const Network& a, const Network& b) {
  if (!(a.spec_ == b.spec_) || a.params_.size() != b.params_.size()) return false;
  for (std::size_t i = 0; i < a.params_.size(); ++i) {
    if (a.params_[i].name != b.params_[i].name || !(a.params_[i].value == b.params_[i].value)) {
      return false;
    }
  }
  return true;
}

Network build_network(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(derive_seed(seed, {0x696e6974 /* "init" */}));
  std::vector<Parameter> params;
  Shape cur{spec.input_height, spec.input_width, spec.input_channels};
  const auto shapes = spec.layer_shapes();
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& layer = spec.layers[i];
    if (const auto* c = std::get_if<ConvLayer>(&layer)) {
      const std::size_t fan_in = c->kernel_h * c->kernel_w * cur[2];
      const std::size_t fan_out = c->kernel_h * c->kernel_w * c->channels;
      const double s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      Tensor w({c->kernel_h, c->kernel_w, cur[2], c->channels});
      for (auto& v : w.values()) v = rng.uniform(-s, s);
      params.push_back({"conv" + std::to_string(i) + ".weight", std::move(w)});
      params.push_back({"conv" + std::to_string(i) + ".bias", Tensor({c->channels}, 0.0)});
    } else if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      const std::size_t fan_in = shape_size(cur);
      const double s = std::sqrt(6.0 / static_cast<double>(fan_in + d->width));
      Tensor w({fan_in, d->width});
      for (auto& v : w.values()) v = rng.uniform(-s, s);
      params.push_back({"fc" + std::to_string(i) + ".weight", std::move(w)});
      params.push_back({"fc" + std::to_string(i) + ".bias", Tensor({d->width}, 0.0)});
    }
    cur = shapes[i];
  }
  return Network(spec, std::move(params), seed);
}

// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
struct GemmBuffers {
  std::vector<T> patches;  // conv: im2col matrix (kept for backward)
  std::vector<T> weight;   // parameter copy in the GEMM scalar type
  std::vector<T> input;    // dense: flattened input in the GEMM scalar type
  std::vector<T> dout;
  std::vector<T> dcols;
};

struct LayerCache {
  Shape in_shape;                     // with batch axis
  std::vector<std::uint32_t> argmax;  // maxpool: flat input index per output
  Tensor out;                         // conv / pool / dense output
  // Activations run in place on the buffer of the layer at `buffer_layer`
  // (kNoLayer for the network input).
  std::size_t buffer_layer = 0;
  double kink_margin = std::numeric_limits<double>::infinity();
  std::size_t param_index = 0;
  GemmBuffers<double> f64;
  GemmBuffers<float> f32;

  template <typename T>
  GemmBuffers<T>& gemm() {
    if constexpr (std::is_same_v<T, float>) {
      return f32;
    } else {
      return f64;
    }
  }
};

}  // namespace detail

ForwardPass::ForwardPass() = default;
ForwardPass::ForwardPass(ForwardPass&&) noexcept = default;
ForwardPass& ForwardPass::operator=(ForwardPass&&) noexcept = default;
ForwardPass::~ForwardPass() = default;

double ForwardPass::min_kink_margin() const {
  double m = std::numeric_limits<double>::infinity();
  for (const auto& c : caches_) m = std::min(m, c->kink_margin);
  return m;
}

std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Precision precision_from_string(const std::string& s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw ConfigError("unknown precision '" + s + "' (expected f32 or f64)");
}

namespace {

constexpr std::size_t kNoLayer = static_cast<std::size_t>(-1);

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapT = Eigen::Map<Mat<T>>;
template <typename T>
using ConstMapT = Eigen::Map<const Mat<T>>;

template <typename T>
void convert(std::span<const double> src, std::vector<T>& dst) {
  dst.resize(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<T>(src[i]);
}

template <typename T>
void im2col(const double* in, std::size_t n, std::size_t h, std::size_t w, std::size_t c, const ConvLayer& conv,
            const ConvGeometry& g, T* out) {
  const std::size_t k = conv.kernel_h * conv.kernel_w * c;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        T* dst = out + ((b * g.out_h + oy) * g.out_w + ox) * k;
        for (std::size_t ky = 0; ky < conv.kernel_h; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * conv.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.pad_top);
          for (std::size_t kx = 0; kx < conv.kernel_w; ++kx) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * conv.stride + kx) -
                            static_cast<std::ptrdiff_t>(g.pad_left);
            T* cell = dst + (ky * conv.kernel_w + kx) * c;
            if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(h) ||
                ix >= static_cast<std::ptrdiff_t>(w)) {
              std::fill(cell, cell + c, T(0));
            } else {
              const double* src =
                  in + ((b * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)) * c;
              for (std::size_t ch = 0; ch < c; ++ch) cell[ch] = static_cast<T>(src[ch]);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, std::size_t n, std::size_t h, std::size_t w, std::size_t c, const ConvLayer& conv,
            const ConvGeometry& g, double* out) {
  std::fill(out, out + n * h * w * c, 0.0);
  const std::size_t k = conv.kernel_h * conv.kernel_w * c;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        const T* src = cols + ((b * g.out_h + oy) * g.out_w + ox) * k;
        for (std::size_t ky = 0; ky < conv.kernel_h; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * conv.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.pad_top);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kx = 0; kx < conv.kernel_w; ++kx) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * conv.stride + kx) -
                            static_cast<std::ptrdiff_t>(g.pad_left);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            const T* cell = src + (ky * conv.kernel_w + kx) * c;
            double* dst =
                out + ((b * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)) * c;
            for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += static_cast<double>(cell[ch]);
          }
        }
      }
    }
  }
}

// GEMM operand view of a double tensor: the tensor itself for double, a
// converted copy in `scratch` otherwise.
template <typename T>
const T* as_gemm_operand(std::span<const double> src, std::vector<T>& scratch) {
  if constexpr (std::is_same_v<T, double>) {
    return src.data();
  } else {
    convert(src, scratch);
    return scratch.data();
  }
}

// out = a * b + bias (row broadcast), accumulated in T and widened to double.
template <typename T>
void gemm_bias(const T* a, const T* b, const double* bias, Eigen::Index rows, Eigen::Index inner, Eigen::Index cols,
               double* out) {
  MapT<double> o(out, rows, cols);
  if constexpr (std::is_same_v<T, double>) {
    o.noalias() = ConstMapT<double>(a, rows, inner) * ConstMapT<double>(b, inner, cols);
  } else {
    o = (ConstMapT<T>(a, rows, inner) * ConstMapT<T>(b, inner, cols)).template cast<double>();
  }
  o.rowwise() += ConstRowVecMap(bias, cols);
}

void check_batch(const NetworkSpec& spec, const Tensor& batch) {
  if (batch.rank() != 4 || batch.dim(1) != spec.input_height || batch.dim(2) != spec.input_width ||
      batch.dim(3) != spec.input_channels) {
    throw InputError("batch shape " + shape_string(batch.shape()) + " does not match network input " +
                     shape_string(spec.input_shape(batch.rank() ? batch.dim(0) : 1)));
  }
}

// Runs the network over `input`, filling the per-layer caches. When
// `check_each_layer` is set every layer output is tested for finiteness so the
// offending layer can be named.
template <typename T>
const Tensor& run_layers(const Network& net, std::vector<std::unique_ptr<detail::LayerCache>>& caches,
                         Tensor& input, bool check_each_layer, bool track_margins) {
  const auto& spec = net.spec();
  const auto& params = net.parameters();
  const std::size_t n = input.dim(0);
  if (caches.size() != spec.layers.size()) {
    caches.clear();
    for (std::size_t i = 0; i < spec.layers.size(); ++i) caches.push_back(std::make_unique<detail::LayerCache>());
  }
  Tensor* cur = &input;
  std::size_t cur_layer = kNoLayer;
  std::size_t pi = 0;
  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    auto& cache = *caches[li];
    auto& buf = cache.gemm<T>();
    cache.in_shape = cur->shape();
    cache.param_index = pi;
    cache.kink_margin = std::numeric_limits<double>::infinity();
    const auto& layer = spec.layers[li];
    if (const auto* conv = std::get_if<ConvLayer>(&layer)) {
      const std::size_t h = cur->dim(1), w = cur->dim(2), c = cur->dim(3);
      const auto g = conv_geometry(h, w, *conv);
      const std::size_t k = conv->kernel_h * conv->kernel_w * c;
      const std::size_t rows = n * g.out_h * g.out_w;
      buf.patches.resize(rows * k);
      im2col(cur->data(), n, h, w, c, *conv, g, buf.patches.data());
      const T* weight = as_gemm_operand<T>(params[pi].value.values(), buf.weight);
      cache.out.resize({n, g.out_h, g.out_w, conv->channels});
      gemm_bias<T>(buf.patches.data(), weight, params[pi + 1].value.data(), static_cast<Eigen::Index>(rows),
                   static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(conv->channels), cache.out.data());
      cur = &cache.out;
      cur_layer = li;
      pi += 2;
    } else if (const auto* pool = std::get_if<MaxPoolLayer>(&layer)) {
      const std::size_t h = cur->dim(1), w = cur->dim(2), c = cur->dim(3);
      const std::size_t win = pool->window;
      const std::size_t oh = h / win, ow = w / win;
      cache.out.resize({n, oh, ow, c});
      cache.argmax.resize(cache.out.size());
      double margin = std::numeric_limits<double>::infinity();
      const double* in = cur->data();
      double* out = cache.out.data();
      std::uint32_t* arg = cache.argmax.data();
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::size_t o = ((b * oh + oy) * ow + ox) * c;
            const std::size_t base = ((b * h + oy * win) * w + ox * win) * c;
            // Window cells are visited in row-major order; ties keep the first.
            for (std::size_t ch = 0; ch < c; ++ch) {
              out[o + ch] = in[base + ch];
              arg[o + ch] = static_cast<std::uint32_t>(base + ch);
            }
            for (std::size_t wy = 0; wy < win; ++wy) {
              for (std::size_t wx = (wy == 0 ? 1 : 0); wx < win; ++wx) {
                const std::size_t cell = base + (wy * w + wx) * c;
                for (std::size_t ch = 0; ch < c; ++ch) {
                  const double v = in[cell + ch];
                  const bool better = v > out[o + ch];
                  out[o + ch] = better ? v : out[o + ch];
                  arg[o + ch] = better ? static_cast<std::uint32_t>(cell + ch) : arg[o + ch];
                }
              }
            }
          }
        }
      }
      if (track_margins && win > 1) {
        // Ties between ReLU outputs that are both clamped to zero are flat,
        // not kinks; the ReLU margin already covers pre-activations near 0.
        const bool after_relu = li > 0 && std::holds_alternative<ActivationLayer>(spec.layers[li - 1]) &&
                                std::get<ActivationLayer>(spec.layers[li - 1]).fn == Activation::relu;
        for (std::size_t o = 0; o < cache.out.size(); ++o) {
          if (after_relu && out[o] == 0.0) continue;
          const std::size_t ch = o % c;
          const std::size_t ox = (o / c) % ow;
          const std::size_t oy = (o / c / ow) % oh;
          const std::size_t b = o / c / ow / oh;
          for (std::size_t wy = 0; wy < win; ++wy) {
            for (std::size_t wx = 0; wx < win; ++wx) {
              const std::size_t idx = ((b * h + oy * win + wy) * w + ox * win + wx) * c + ch;
              if (idx != arg[o]) margin = std::min(margin, out[o] - in[idx]);
            }
          }
        }
      }
      cache.kink_margin = margin;
      cur = &cache.out;
      cur_layer = li;
    } else if (const auto* dense = std::get_if<DenseLayer>(&layer)) {
      const std::size_t in_features = cur->size() / n;
      const T* x = as_gemm_operand<T>(cur->values(), buf.input);
      const T* weight = as_gemm_operand<T>(params[pi].value.values(), buf.weight);
      cache.out.resize({n, dense->width});
      gemm_bias<T>(x, weight, params[pi + 1].value.data(), static_cast<Eigen::Index>(n),
                   static_cast<Eigen::Index>(in_features), static_cast<Eigen::Index>(dense->width), cache.out.data());
      cur = &cache.out;
      cur_layer = li;
      pi += 2;
    } else {
      cache.buffer_layer = cur_layer;
      switch (std::get<ActivationLayer>(layer).fn) {
        case Activation::relu: {
          double margin = std::numeric_limits<double>::infinity();
          if (track_margins) {
            for (double v : cur->values()) margin = std::min(margin, std::abs(v));
          }
          for (double& v : cur->values()) v = v > 0.0 ? v : 0.0;
          cache.kink_margin = margin;
          break;
        }
        case Activation::tanh:
          for (double& v : cur->values()) v = std::tanh(v);
          break;
        case Activation::linear:
          break;
      }
    }
    if (check_each_layer && !cur->all_finite()) {
      throw NumericError("non-finite output at layer " + std::to_string(li) + " (" + layer_name(layer) + ")");
    }
  }
  return *cur;
}

void run_checked(const Network& net, std::vector<std::unique_ptr<detail::LayerCache>>& caches, Tensor& input,
                 Tensor& output, const Tensor& batch, Precision precision, bool track_margins) {
  const Tensor& result = precision == Precision::f32
                             ? run_layers<float>(net, caches, input, false, track_margins)
                             : run_layers<double>(net, caches, input, false, track_margins);
  output.resize(result.shape());
  std::copy(result.values().begin(), result.values().end(), output.values().begin());
  if (!output.all_finite()) {
    // Slow path: re-run layer by layer to name the first non-finite layer.
    Tensor again = batch;
    std::vector<std::unique_ptr<detail::LayerCache>> scratch;
    run_layers<double>(net, scratch, again, true, false);
    throw NumericError("non-finite network output");
  }
}

// Row-by-row accumulation: unlike Eigen's vectorised reductions the order of
// additions does not depend on the buffer's alignment, so repeated runs agree
// bit for bit.
void column_sums(const double* m, std::size_t rows, std::size_t cols, double* out) {
  std::fill(out, out + cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = m + r * cols;
    for (std::size_t c = 0; c < cols; ++c) out[c] += row[c];
  }
}

template <typename T>
void run_backward(const Network& net, std::vector<std::unique_ptr<detail::LayerCache>>& caches, const Tensor& input,
                  Tensor*& grad, Tensor*& spare, Gradients& grads) {
  const auto& spec = net.spec();
  const auto& params = net.parameters();

  // Layers below the first parameterised one need no input gradient.
  std::size_t first_param_layer = spec.layers.size();
  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    if (std::holds_alternative<ConvLayer>(spec.layers[li]) || std::holds_alternative<DenseLayer>(spec.layers[li])) {
      first_param_layer = li;
      break;
    }
  }
  auto buffer_of = [&](std::size_t layer) -> const Tensor& {
    return layer == kNoLayer ? input : caches[layer]->out;
  };

  for (std::size_t li = spec.layers.size(); li-- > first_param_layer;) {
    auto& cache = *caches[li];
    auto& buf = cache.gemm<T>();
    const bool need_input_grad = li > first_param_layer;
    const std::size_t n = cache.in_shape[0];
    const auto& layer = spec.layers[li];
    if (const auto* conv = std::get_if<ConvLayer>(&layer)) {
      const std::size_t h = cache.in_shape[1], w = cache.in_shape[2], c = cache.in_shape[3];
      const auto g = conv_geometry(h, w, *conv);
      const auto k = static_cast<Eigen::Index>(conv->kernel_h * conv->kernel_w * c);
      const auto rows = static_cast<Eigen::Index>(n * g.out_h * g.out_w);
      const auto cout = static_cast<Eigen::Index>(conv->channels);
      const T* dout_ptr = as_gemm_operand<T>(grad->values(), buf.dout);
      ConstMapT<T> dout(dout_ptr, rows, cout);
      ConstMapT<T> patches(buf.patches.data(), rows, k);
      auto& dw = grads.tensors[cache.param_index];
      auto& db = grads.tensors[cache.param_index + 1];
      if constexpr (std::is_same_v<T, double>) {
        MapT<double>(dw.data(), k, cout).noalias() = patches.transpose() * dout;
      } else {
        MapT<double>(dw.data(), k, cout) = (patches.transpose() * dout).template cast<double>();
      }
      column_sums(grad->data(), static_cast<std::size_t>(rows), static_cast<std::size_t>(cout), db.data());
      if (need_input_grad) {
        buf.dcols.resize(static_cast<std::size_t>(rows * k));
        const T* weight;
        if constexpr (std::is_same_v<T, double>) {
          weight = params[cache.param_index].value.data();
        } else {
          weight = buf.weight.data();  // converted during the forward pass
        }
        MapT<T>(buf.dcols.data(), rows, k).noalias() = dout * ConstMapT<T>(weight, k, cout).transpose();
        spare->resize(cache.in_shape);
        col2im(buf.dcols.data(), n, h, w, c, *conv, g, spare->data());
        std::swap(grad, spare);
      }
    } else if (std::holds_alternative<MaxPoolLayer>(layer)) {
      spare->resize(cache.in_shape);
      spare->fill(0.0);
      for (std::size_t o = 0; o < grad->size(); ++o) (*spare)[cache.argmax[o]] += (*grad)[o];
      std::swap(grad, spare);
    } else if (const auto* dense = std::get_if<DenseLayer>(&layer)) {
      const auto width = static_cast<Eigen::Index>(dense->width);
      const auto rows = static_cast<Eigen::Index>(n);
      const auto in_features = static_cast<Eigen::Index>(shape_size(cache.in_shape) / n);
      const T* x_ptr;
      if constexpr (std::is_same_v<T, double>) {
        // The layer input buffer still holds what the forward pass consumed.
        std::size_t src = kNoLayer;
        for (std::size_t j = li; j-- > 0;) {
          if (!std::holds_alternative<ActivationLayer>(spec.layers[j])) {
            src = j;
            break;
          }
        }
        x_ptr = buffer_of(src).data();
      } else {
        x_ptr = buf.input.data();
      }
      const T* dout_ptr = as_gemm_operand<T>(grad->values(), buf.dout);
      ConstMapT<T> dout(dout_ptr, rows, width);
      ConstMapT<T> x(x_ptr, rows, in_features);
      auto& dw = grads.tensors[cache.param_index];
      auto& db = grads.tensors[cache.param_index + 1];
      if constexpr (std::is_same_v<T, double>) {
        MapT<double>(dw.data(), in_features, width).noalias() = x.transpose() * dout;
      } else {
        MapT<double>(dw.data(), in_features, width) = (x.transpose() * dout).template cast<double>();
      }
      column_sums(grad->data(), static_cast<std::size_t>(rows), static_cast<std::size_t>(width), db.data());
      if (need_input_grad) {
        const T* weight;
        if constexpr (std::is_same_v<T, double>) {
          weight = params[cache.param_index].value.data();
        } else {
          weight = buf.weight.data();  // converted during the forward pass
        }
        spare->resize(cache.in_shape);
        if constexpr (std::is_same_v<T, double>) {
          MatMap(spare->data(), rows, in_features).noalias() =
              dout * ConstMapT<T>(weight, in_features, width).transpose();
        } else {
          MatMap(spare->data(), rows, in_features) =
              (dout * ConstMapT<T>(weight, in_features, width).transpose()).template cast<double>();
        }
        std::swap(grad, spare);
      }
    } else {
      const auto fn = std::get<ActivationLayer>(layer).fn;
      const Tensor& y = buffer_of(cache.buffer_layer);
      if (fn == Activation::relu) {
        for (std::size_t i = 0; i < grad->size(); ++i) {
          if (!(y[i] > 0.0)) (*grad)[i] = 0.0;
        }
      } else if (fn == Activation::tanh) {
        for (std::size_t i = 0; i < grad->size(); ++i) (*grad)[i] *= 1.0 - y[i] * y[i];
      }
    }
  }
}

}  // namespace

Tensor forward(const Network& net, const Tensor& batch, Precision precision) {
  check_batch(net.spec(), batch);
  ForwardPass pass;
  pass.input_ = batch;
  run_checked(net, pass.caches_, pass.input_, pass.output_, batch, precision, false);
  return std::move(pass.output_);
}

void forward_recording(const Network& net, const Tensor& batch, ForwardPass& pass) {
  check_batch(net.spec(), batch);
  pass.input_.resize(batch.shape());
  std::copy(batch.values().begin(), batch.values().end(), pass.input_.values().begin());
  run_checked(net, pass.caches_, pass.input_, pass.output_, batch, pass.precision_, pass.track_margins_);
  pass.recorded_precision_ = pass.precision_;
}

ForwardPass forward_recording(const Network& net, const Tensor& batch) {
  ForwardPass pass;
  forward_recording(net, batch, pass);
  return pass;
}

void backward(const Network& net, ForwardPass& pass, const Tensor& output_grad, Gradients& grads) {
  const auto& spec = net.spec();
  const auto& params = net.parameters();
  if (pass.caches_.size() != spec.layers.size()) throw StateError("forward pass does not belong to this network");
  if (output_grad.shape() != pass.output_.shape()) {
    throw InputError("output gradient shape " + shape_string(output_grad.shape()) + " does not match output " +
                     shape_string(pass.output_.shape()));
  }
  grads.tensors.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) grads.tensors[i].resize(params[i].value.shape());

  Tensor* grad = &pass.grad_a_;
  Tensor* spare = &pass.grad_b_;
  grad->resize(output_grad.shape());
  std::copy(output_grad.values().begin(), output_grad.values().end(), grad->values().begin());
  if (pass.recorded_precision_ == Precision::f32) {
    run_backward<float>(net, pass.caches_, pass.input_, grad, spare, grads);
  } else {
    run_backward<double>(net, pass.caches_, pass.input_, grad, spare, grads);
  }
}

Gradients backward(const Network& net, ForwardPass& pass, const Tensor& output_grad) {
  Gradients grads;
  backward(net, pass, output_grad, grads);
  return grads;
}

void gradients(const Network& net, const Tensor& batch, const FeatureObjective& objective, ForwardPass& pass,
               GradientResult& result) {
  forward_recording(net, batch, pass);
  LossEval loss = objective(pass.output());
  if (!std::isfinite(loss.value) || !loss.grad.all_finite()) {
    throw NumericError("non-finite loss at objective layer (after layer " +
                       std::to_string(net.spec().layers.size() - 1) + ")");
  }
  result.loss = loss.value;
  backward(net, pass, loss.grad, result.grads);
}

GradientResult gradients(const Network& net, const Tensor& batch, const FeatureObjective& objective) {
  ForwardPass pass;
  GradientResult result;
  gradients(net, batch, objective, pass, result);
  return result;
}

}  // namespace ddh
