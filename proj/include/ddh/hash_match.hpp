#pragma once

#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ddh/tensor.hpp"

namespace ddh {

constexpr std::size_t kCodeBits = 128;
constexpr std::size_t kCodeBytes = kCodeBits / 8;

// 128-bit code. Bit k of byte j holds feature 8j+k.
struct HashCode {
  std::array<std::uint8_t, kCodeBytes> bytes{};

  bool bit(std::size_t index) const { return (bytes[index / 8] >> (index % 8)) & 1U; }
  void set_bit(std::size_t index, bool on) {
    const auto mask = static_cast<std::uint8_t>(1U << (index % 8));
    bytes[index / 8] = on ? (bytes[index / 8] | mask) : (bytes[index / 8] & ~mask);
  }
  std::string hex() const;
  static HashCode from_hex(const std::string& hex);

  friend bool operator==(const HashCode&, const HashCode&) = default;
};

// bit i = (h_i >= 0)
HashCode binarize(std::span<const double> feature);
std::vector<HashCode> binarize_rows(const Tensor& features);

inline int hamming(const HashCode& a, const HashCode& b) {
  std::uint64_t a0, a1, b0, b1;
  std::memcpy(&a0, a.bytes.data(), 8);
  std::memcpy(&a1, a.bytes.data() + 8, 8);
  std::memcpy(&b0, b.bytes.data(), 8);
  std::memcpy(&b1, b.bytes.data() + 8, 8);
  return std::popcount(a0 ^ b0) + std::popcount(a1 ^ b1);
}

struct GalleryEntry {
  std::size_t entry_id;
  const std::string& label;
  const HashCode& code;
};

// Ordered multiset of enrolled codes; entry ids are insertion indices.
class Gallery {
 public:
  std::size_t enroll(std::string label, const HashCode& code);

  std::size_t size() const { return codes_.size(); }
  bool empty() const { return codes_.empty(); }
  GalleryEntry entry(std::size_t id) const { return {id, labels_.at(id), codes_.at(id)}; }
  const std::vector<std::string>& labels() const { return labels_; }
  const std::vector<HashCode>& codes() const { return codes_; }

  friend bool operator==(const Gallery&, const Gallery&) = default;

 private:
  std::vector<std::string> labels_;
  std::vector<HashCode> codes_;
};

struct Match {
  std::string label;
  int distance;
  std::size_t entry_id;
};

// Nearest entry by Hamming distance; ties go to the smallest entry id.
Match identify(const Gallery& gallery, const HashCode& probe);

struct Verification {
  bool accept;
  int distance;
};

// Accepts iff hamming(a, b) <= threshold.
Verification verify(const HashCode& a, const HashCode& b, int threshold);

void save_gallery(const Gallery& gallery, const std::filesystem::path& path);
Gallery load_gallery(const std::filesystem::path& path);

}  // namespace ddh
