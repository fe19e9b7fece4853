#include "ddh/checkpoint.hpp"

#include <fstream>

#include "ddh/binary_io.hpp"
#include "ddh/error.hpp"

namespace ddh {

namespace {

using binio::read_le;
using binio::write_le;

constexpr char kMagic[4] = {'D', 'D', 'H', '1'};

enum : std::uint8_t { kConv = 0, kPool = 1, kDense = 2, kAct = 3 };

void write_spec(std::ostream& os, const NetworkSpec& spec) {
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(spec.input_height));
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(spec.input_width));
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(spec.input_channels));
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(spec.code_width));
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(spec.layers.size()));
  for (const auto& layer : spec.layers) {
    if (const auto* c = std::get_if<ConvLayer>(&layer)) {
      write_le<std::uint8_t>(os, kConv);
      write_le<std::uint32_t>(os, static_cast<std::uint32_t>(c->kernel_h));
      write_le<std::uint32_t>(os, static_cast<std::uint32_t>(c->kernel_w));
      write_le<std::uint32_t>(os, static_cast<std::uint32_t>(c->channels));
      write_le<std::uint32_t>(os, static_cast<std::uint32_t>(c->stride));
    } else if (const auto* p = std::get_if<MaxPoolLayer>(&layer)) {
      write_le<std::uint8_t>(os, kPool);
      write_le<std::uint32_t>(os, static_cast<std::uint32_t>(p->window));
    } else if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      write_le<std::uint8_t>(os, kDense);
      write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d->width));
      write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d->in_features));
    } else {
      write_le<std::uint8_t>(os, kAct);
      write_le<std::uint8_t>(os, static_cast<std::uint8_t>(std::get<ActivationLayer>(layer).fn));
    }
  }
}

NetworkSpec read_spec(std::istream& is) {
  NetworkSpec spec;
  spec.input_height = read_le<std::uint32_t>(is, "spec");
  spec.input_width = read_le<std::uint32_t>(is, "spec");
  spec.input_channels = read_le<std::uint32_t>(is, "spec");
  spec.code_width = read_le<std::uint32_t>(is, "spec");
  const auto count = read_le<std::uint32_t>(is, "spec");
  if (count > 4096) throw FormatError("implausible layer count " + std::to_string(count));
  for (std::uint32_t i = 0; i < count; ++i) {
    switch (read_le<std::uint8_t>(is, "layer tag")) {
      case kConv: {
        ConvLayer c;
        c.kernel_h = read_le<std::uint32_t>(is, "conv layer");
        c.kernel_w = read_le<std::uint32_t>(is, "conv layer");
        c.channels = read_le<std::uint32_t>(is, "conv layer");
        c.stride = read_le<std::uint32_t>(is, "conv layer");
        spec.layers.emplace_back(c);
        break;
      }
      case kPool:
        spec.layers.emplace_back(MaxPoolLayer{read_le<std::uint32_t>(is, "pool layer")});
        break;
      case kDense: {
        DenseLayer d;
        d.width = read_le<std::uint32_t>(is, "fc layer");
        d.in_features = read_le<std::uint32_t>(is, "fc layer");
        spec.layers.emplace_back(d);
        break;
      }
      case kAct: {
        const auto fn = read_le<std::uint8_t>(is, "activation layer");
        if (fn > static_cast<std::uint8_t>(Activation::linear)) throw FormatError("unknown activation tag");
        spec.layers.emplace_back(ActivationLayer{static_cast<Activation>(fn)});
        break;
      }
      default:
        throw FormatError("unknown layer tag");
    }
  }
  return spec;
}

void write_values(std::ostream& os, const Tensor& t) {
  for (double v : t.values()) write_le<double>(os, v);
}

void read_values(std::istream& is, Tensor& t, const char* what) {
  for (double& v : t.values()) v = read_le<double>(is, what);
}

}  // namespace

void save_checkpoint(const Network& net, const OptimizerState& optimizer, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
  binio::write_bytes(os, kMagic, sizeof kMagic);
  write_le<std::uint32_t>(os, kCheckpointVersion);
  write_spec(os, net.spec());
  write_le<std::uint64_t>(os, net.seed());
  const auto& params = net.parameters();
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    write_le<std::uint64_t>(os, p.value.size());
    write_values(os, p.value);
  }
  write_le<std::uint8_t>(os, static_cast<std::uint8_t>(optimizer.method));
  write_le<double>(os, optimizer.learning_rate);
  write_le<double>(os, optimizer.beta1);
  write_le<double>(os, optimizer.beta2);
  write_le<double>(os, optimizer.epsilon);
  write_le<std::uint64_t>(os, optimizer.step);
  const bool has_moments = !optimizer.first_moment.empty();
  write_le<std::uint8_t>(os, has_moments ? 1 : 0);
  if (has_moments) {
    for (const auto& m : optimizer.first_moment) write_values(os, m);
    for (const auto& v : optimizer.second_moment) write_values(os, v);
  }
  if (!os) throw IoError("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, std::optional<std::size_t> expected_code_width) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  char magic[4];
  binio::read_bytes(is, magic, sizeof magic, "magic");
  if (!std::equal(magic, magic + 4, kMagic)) throw FormatError(path.string() + ": not a DDH checkpoint (bad magic)");
  const auto version = read_le<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) {
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  NetworkSpec spec = read_spec(is);
  try {
    spec.validate();
  } catch (const SpecError& e) {
    throw FormatError(path.string() + ": stored spec is invalid: " + e.what());
  }
  if (expected_code_width && spec.code_width != *expected_code_width) {
    throw SpecError(path.string() + ": checkpoint code width " + std::to_string(spec.code_width) +
                    " differs from expected " + std::to_string(*expected_code_width));
  }
  const auto seed = read_le<std::uint64_t>(is, "seed");
  Network net = build_network(spec, seed);
  auto& params = net.parameters();
  const auto count = read_le<std::uint32_t>(is, "parameter count");
  if (count != params.size()) throw FormatError("parameter count does not match stored spec");
  for (auto& p : params) {
    if (read_le<std::uint64_t>(is, "parameter size") != p.value.size()) {
      throw FormatError("parameter " + p.name + " size does not match stored spec");
    }
    read_values(is, p.value, "parameter values");
  }
  OptimizerState opt;
  const auto method = read_le<std::uint8_t>(is, "optimizer");
  if (method > static_cast<std::uint8_t>(OptimizerMethod::adam)) throw FormatError("unknown optimizer tag");
  opt.method = static_cast<OptimizerMethod>(method);
  opt.learning_rate = read_le<double>(is, "optimizer");
  opt.beta1 = read_le<double>(is, "optimizer");
  opt.beta2 = read_le<double>(is, "optimizer");
  opt.epsilon = read_le<double>(is, "optimizer");
  opt.step = read_le<std::uint64_t>(is, "optimizer");
  const auto has_moments = read_le<std::uint8_t>(is, "optimizer");
  if (has_moments > 1) throw FormatError("corrupt optimizer moments flag");
  if (has_moments) {
    for (const auto& p : params) opt.first_moment.emplace_back(p.value.shape(), 0.0);
    for (const auto& p : params) opt.second_moment.emplace_back(p.value.shape(), 0.0);
    for (auto& m : opt.first_moment) read_values(is, m, "optimizer moments");
    for (auto& v : opt.second_moment) read_values(is, v, "optimizer moments");
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError(path.string() + ": trailing bytes after checkpoint");
  return Checkpoint{std::move(net), std::move(opt)};
}

}  // namespace ddh
