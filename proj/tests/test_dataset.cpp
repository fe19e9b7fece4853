#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "ddh/dataset.hpp"
#include "ddh/error.hpp"
#include "ddh/image_io.hpp"
#include "test_util.hpp"

using namespace ddh;
namespace fs = std::filesystem;

namespace {

double correlation(const Tensor& a, const Tensor& b) {
  const auto n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

void write_bmp24(const fs::path& p, std::size_t w, std::size_t h, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  const std::size_t row = (3 * w + 3) / 4 * 4;
  const std::uint32_t size = static_cast<std::uint32_t>(54 + row * h);
  std::ofstream os(p, std::ios::binary);
  auto u16 = [&](std::uint16_t v) { os.put(static_cast<char>(v & 0xFF)).put(static_cast<char>(v >> 8)); };
  auto u32 = [&](std::uint32_t v) {
    for (int k = 0; k < 4; ++k) os.put(static_cast<char>((v >> (8 * k)) & 0xFF));
  };
  os.write("BM", 2);
  u32(size);
  u32(0);
  u32(54);
  u32(40);
  u32(static_cast<std::uint32_t>(w));
  u32(static_cast<std::uint32_t>(h));
  u16(1);
  u16(24);
  u32(0);
  u32(static_cast<std::uint32_t>(row * h));
  u32(2835);
  u32(2835);
  u32(0);
  u32(0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) os.put(static_cast<char>(b)).put(static_cast<char>(g)).put(static_cast<char>(r));
    for (std::size_t k = 3 * w; k < row; ++k) os.put(0);
  }
}

}  // namespace

TEST_CASE("synthetic generator counts, range and determinism") {
  const Dataset ds = gen_synthetic(10, 4, 64, 7);
  CHECK(ds.size() == 40);
  CHECK(ds.num_classes() == 10);
  CHECK(ds.height() == 64);
  CHECK(ds.width() == 64);
  for (const auto& item : ds.items())
    for (double v : item.image.values()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  const Dataset again = gen_synthetic(10, 4, 64, 7);
  for (std::size_t i = 0; i < ds.size(); ++i) CHECK(ds.item(i).image == again.item(i).image);
  CHECK_FALSE(gen_synthetic(10, 4, 64, 8).item(0).image == ds.item(0).image);
  CHECK_THROWS_AS(gen_synthetic(1, 4, 64, 7), InputError);
  CHECK_THROWS_AS(gen_synthetic(3, 1, 64, 7), InputError);
}

TEST_CASE("synthetic classes are more self-similar than cross-similar") {
  const Dataset ds = gen_synthetic(50, 10, 64, 3);
  double intra = 0, inter = 0;
  std::size_t ni = 0, nx = 0;
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t j = i + 1; j < ds.size(); ++j) {
      const double r = correlation(ds.item(i).image, ds.item(j).image);
      if (ds.item(i).class_index == ds.item(j).class_index) {
        intra += r;
        ++ni;
      } else {
        inter += r;
        ++nx;
      }
    }
  CHECK(intra / static_cast<double>(ni) > inter / static_cast<double>(nx));
}

TEST_CASE("raw-pixel nearest neighbour beats chance on synthetic data") {
  const Dataset ds = gen_synthetic(50, 10, 64, 0);
  const Split sp = split(ds, {});
  std::size_t hits = 0;
  for (const auto& probe : sp.test.items()) {
    double best = 1e300;
    std::size_t label = 0;
    for (const auto& g : sp.train.items()) {
      double d = 0;
      for (std::size_t k = 0; k < probe.image.size(); ++k) d += std::pow(probe.image[k] - g.image[k], 2);
      if (d < best) {
        best = d;
        label = g.class_index;
      }
    }
    hits += label == probe.class_index ? 1 : 0;
  }
  CHECK(static_cast<double>(hits) / static_cast<double>(sp.test.size()) > 1.0 / 50.0);
}

TEST_CASE("split") {
  const Dataset ds = gen_synthetic(6, 10, 16, 1);
  const Split a = split(ds, {0.5, 11});
  CHECK(a.train.size() == 30);
  CHECK(a.test.size() == 30);
  for (const auto& m : a.train.members_by_class()) CHECK(m.size() == 5);

  // Disjoint and exhaustive: every generated image appears exactly once.
  std::multiset<std::vector<double>> all, parts;
  for (const auto& it : ds.items()) all.insert({it.image.values().begin(), it.image.values().end()});
  for (const auto* half : {&a.train, &a.test})
    for (const auto& it : half->items()) parts.insert({it.image.values().begin(), it.image.values().end()});
  CHECK(all == parts);

  const Split b = split(ds, {0.5, 11});
  for (std::size_t i = 0; i < a.train.size(); ++i) CHECK(a.train.item(i).image == b.train.item(i).image);
  const Split c = split(ds, {0.5, 12});
  bool differs = false;
  for (std::size_t i = 0; i < a.train.size(); ++i) differs = differs || !(a.train.item(i).image == c.train.item(i).image);
  CHECK(differs);

  const Split fixed = split(ds, {0.5, 0, 6});
  CHECK(fixed.train.size() == 36);
  const Split floor_split = split(gen_synthetic(3, 5, 16, 1), {0.5, 0});
  CHECK(floor_split.train.size() == 6);

  CHECK_THROWS_AS(split(ds, {1.0, 0}), ConfigError);
  CHECK_THROWS_AS(split(gen_synthetic(3, 2, 16, 1), {0.4, 0}), DataError);
}

TEST_CASE("pair batches") {
  const Dataset ds = gen_synthetic(6, 5, 16, 2);
  const PairBatch b = sample_pair_batch(ds, 4, 2, 9, 0);
  CHECK(b.images.shape() == Shape{8, 16, 16, 1});
  CHECK(b.labels.genuine_count() == 4);
  CHECK(b.labels.imposter_count() == 24);
  std::size_t gen = 0, imp = 0;
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) {
      CHECK(b.labels.s(i, j) == b.labels.s(j, i));
      if (i < j) (b.labels.genuine(i, j) ? gen : imp)++;
    }
  CHECK(gen == 4);
  CHECK(imp == 24);
  for (std::size_t i = 0; i < 8; ++i) CHECK(ds.item(b.indices[i]).class_index == b.labels.classes()[i]);

  const PairBatch again = sample_pair_batch(ds, 4, 2, 9, 0);
  CHECK(again.indices == b.indices);
  CHECK(again.images == b.images);
  CHECK_FALSE(sample_pair_batch(ds, 4, 2, 9, 1).indices == b.indices);
  std::set<std::size_t> unique(b.indices.begin(), b.indices.end());
  CHECK(unique.size() == 8);

  CHECK_THROWS_AS(sample_pair_batch(ds, 7, 2, 9, 0), DataError);
  CHECK_THROWS_AS(sample_pair_batch(ds, 2, 6, 9, 0), DataError);

  for (std::uint64_t step = 0; step < 50; ++step) {
    const auto r = sample_pair_batch(ds, 3, 2, 1, step);
    CHECK(r.labels.genuine_count() >= 1);
    CHECK(r.labels.imposter_count() >= 1);
  }
}

TEST_CASE("export and load roundtrip") {
  test_util::TempDir dir;
  const Dataset ds = gen_synthetic(3, 4, 32, 5);
  CHECK(export_dataset(ds, dir.path) == 12);
  CHECK(fs::exists(dir.path / "c000" / "0003.png"));
  const Dataset back = load_dataset(dir.path, 32, 32);
  CHECK(back.size() == 12);
  CHECK(back.num_classes() == 3);
  CHECK(back.class_names() == ds.class_names());
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(back.item(i).class_index == ds.item(i).class_index);
    for (std::size_t k = 0; k < 32 * 32; ++k) CHECK(std::abs(back.item(i).image[k] - ds.item(i).image[k]) <= 0.5 / 255.0 + 1e-12);
  }
  const Dataset twice = load_dataset(dir.path, 32, 32);
  for (std::size_t i = 0; i < 12; ++i) CHECK(twice.item(i).source_path == back.item(i).source_path);

  const Dataset small = load_dataset(dir.path, 16, 8);
  CHECK(small.height() == 16);
  CHECK(small.width() == 8);
}

TEST_CASE("load errors") {
  test_util::TempDir dir;
  CHECK_THROWS_AS(load_dataset(dir.path / "nope"), DataError);
  fs::create_directories(dir.path / "a");
  fs::create_directories(dir.path / "b");
  const Dataset one = gen_synthetic(2, 2, 16, 1);
  write_png(one.item(0).image, dir.path / "a" / "0.png");
  write_png(one.item(1).image, dir.path / "a" / "1.png");
  write_png(one.item(2).image, dir.path / "b" / "0.png");
  CHECK_THROWS_AS(load_dataset(dir.path), DataError);  // class b has one image

  std::ofstream(dir.path / "b" / "1.png") << "not a png";
  try {
    load_dataset(dir.path);
    FAIL("corrupt image accepted");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("1.png") != std::string::npos);
  }
}

TEST_CASE("image io") {
  test_util::TempDir dir;
  write_bmp24(dir.path / "c.bmp", 5, 3, 255, 0, 0);
  const Tensor red = read_image(dir.path / "c.bmp");
  CHECK(red.shape() == Shape{3, 5});
  CHECK(red.at(2, 4) == doctest::Approx(0.299).epsilon(1e-3));

  Tensor grad({4, 6});
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 6; ++c) grad.at(r, c) = static_cast<double>(r * 6 + c) / 23.0;
  write_png(grad, dir.path / "g.png");
  const Tensor back = read_image(dir.path / "g.png");
  for (std::size_t i = 0; i < grad.size(); ++i) CHECK(std::abs(back[i] - grad[i]) <= 0.5 / 255.0 + 1e-12);

  CHECK(sample_bilinear(grad, 0.5, 0.5) == grad.at(0, 0));
  CHECK(sample_bilinear(grad, 1.0, 0.5) == doctest::Approx((grad.at(0, 0) + grad.at(0, 1)) / 2));
  CHECK(sample_bilinear(grad, -3.0, -3.0) == grad.at(0, 0));

  const Tensor same = resize_bilinear(grad, 4, 6);
  CHECK(same == grad);

  std::ofstream(dir.path / "bad.bmp") << "BMxxxx";
  CHECK_THROWS_AS(read_image(dir.path / "bad.bmp"), DataError);
  CHECK_THROWS_AS(read_image(dir.path / "missing.png"), DataError);
}
