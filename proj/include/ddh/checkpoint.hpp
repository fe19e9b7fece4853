#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include "ddh/network.hpp"
#include "ddh/optimizer.hpp"

namespace ddh {

// Checkpoint layout (all integers and floats little-endian):
//   "DDH1" | u32 version | spec | u64 init seed |
//   u32 parameter count | per parameter: u64 element count, f64 values |
//   optimizer: u8 method, f64 lr, f64 beta1, f64 beta2, f64 eps, u64 step,
//              u8 has_moments, [f64 first moments, f64 second moments]
// The spec block is: u32 input h, w, c | u32 code width | u32 layer count |
// per layer a u8 tag (0 conv, 1 maxpool, 2 fc, 3 activation) and its fields.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Network network;
  OptimizerState optimizer;
};

void save_checkpoint(const Network& net, const OptimizerState& optimizer, const std::filesystem::path& path);

// Throws FormatError on bad magic/version/truncation and SpecError when
// `expected_code_width` is given and differs from the stored spec.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           std::optional<std::size_t> expected_code_width = std::nullopt);

}  // namespace ddh
