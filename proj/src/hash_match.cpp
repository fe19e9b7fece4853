#include "ddh/hash_match.hpp"

#include <fstream>
#include <limits>

#include "ddh/binary_io.hpp"
#include "ddh/error.hpp"

namespace ddh {

namespace {

using binio::read_le;
using binio::write_le;

constexpr char kMagic[4] = {'D', 'D', 'H', 'G'};
constexpr std::uint8_t kVersion = 1;
// Labels longer than this are treated as corruption rather than allocated.
constexpr std::uint32_t kMaxLabelBytes = 1U << 20;

}  // namespace

std::string HashCode::hex() const {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s;
  s.reserve(2 * kCodeBytes);
  for (auto b : bytes) {
    s.push_back(digits[b >> 4]);
    s.push_back(digits[b & 0xF]);
  }
  return s;
}

HashCode HashCode::from_hex(const std::string& hex) {
  if (hex.size() != 2 * kCodeBytes) {
    throw InputError("hash code must be " + std::to_string(2 * kCodeBytes) + " hex digits, got " +
                     std::to_string(hex.size()));
  }
  auto nibble = [&](char c) -> std::uint8_t {
    if (c >= '0' && c <= '9') return static_cast<std::uint8_t>(c - '0');
    if (c >= 'a' && c <= 'f') return static_cast<std::uint8_t>(c - 'a' + 10);
    if (c >= 'A' && c <= 'F') return static_cast<std::uint8_t>(c - 'A' + 10);
    throw InputError("invalid hex digit '" + std::string(1, c) + "' in hash code");
  };
  HashCode code;
  for (std::size_t j = 0; j < kCodeBytes; ++j) {
    code.bytes[j] = static_cast<std::uint8_t>((nibble(hex[2 * j]) << 4) | nibble(hex[2 * j + 1]));
  }
  return code;
}

HashCode binarize(std::span<const double> feature) {
  if (feature.size() != kCodeBits) {
    throw InputError("binarize expects " + std::to_string(kCodeBits) + " features, got " +
                     std::to_string(feature.size()));
  }
  HashCode code;
  for (std::size_t i = 0; i < kCodeBits; ++i) {
    if (feature[i] >= 0.0) code.bytes[i / 8] |= static_cast<std::uint8_t>(1U << (i % 8));
  }
  return code;
}

std::vector<HashCode> binarize_rows(const Tensor& features) {
  if (features.rank() != 2) throw InputError("binarize_rows expects an N x 128 matrix");
  std::vector<HashCode> codes;
  codes.reserve(features.dim(0));
  for (std::size_t i = 0; i < features.dim(0); ++i) codes.push_back(binarize(features.row(i)));
  return codes;
}

std::size_t Gallery::enroll(std::string label, const HashCode& code) {
  labels_.push_back(std::move(label));
  codes_.push_back(code);
  return codes_.size() - 1;
}

Match identify(const Gallery& gallery, const HashCode& probe) {
  if (gallery.empty()) throw StateError("identify on an empty gallery");
  const auto& codes = gallery.codes();
  int best = std::numeric_limits<int>::max();
  std::size_t best_id = 0;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    const int d = hamming(codes[i], probe);
    if (d < best) {
      best = d;
      best_id = i;
      if (d == 0) break;
    }
  }
  return {gallery.labels()[best_id], best, best_id};
}

Verification verify(const HashCode& a, const HashCode& b, int threshold) {
  if (threshold < 0 || threshold > static_cast<int>(kCodeBits)) {
    throw InputError("threshold " + std::to_string(threshold) + " outside [0, 128]");
  }
  const int d = hamming(a, b);
  return {d <= threshold, d};
}

void save_gallery(const Gallery& gallery, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  binio::write_bytes(os, kMagic, 4);
  write_le<std::uint8_t>(os, kVersion);
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(kCodeBits));
  write_le<std::uint64_t>(os, gallery.size());
  for (std::size_t i = 0; i < gallery.size(); ++i) {
    const auto& label = gallery.labels()[i];
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(label.size()));
    binio::write_bytes(os, label.data(), label.size());
    binio::write_bytes(os, gallery.codes()[i].bytes.data(), kCodeBytes);
  }
  if (!os.flush()) throw IoError("failed writing " + path.string());
}

Gallery load_gallery(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  char magic[4];
  binio::read_bytes(is, magic, 4, "gallery magic");
  if (!std::equal(magic, magic + 4, kMagic)) throw FormatError(path.string() + " is not a gallery file");
  const auto version = read_le<std::uint8_t>(is, "gallery version");
  if (version != kVersion) throw FormatError("unsupported gallery version " + std::to_string(version));
  const auto bits = read_le<std::uint32_t>(is, "code length");
  if (bits != kCodeBits) throw FormatError("gallery code length " + std::to_string(bits) + ", expected 128");
  const auto count = read_le<std::uint64_t>(is, "entry count");
  Gallery g;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = read_le<std::uint32_t>(is, "label length");
    if (len > kMaxLabelBytes) throw FormatError("label length " + std::to_string(len) + " is implausible");
    std::string label(len, '\0');
    binio::read_bytes(is, label.data(), len, "label");
    HashCode code;
    binio::read_bytes(is, code.bytes.data(), kCodeBytes, "code");
    g.enroll(std::move(label), code);
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after gallery entries");
  return g;
}

}  // namespace ddh
