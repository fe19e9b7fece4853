#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "ddh/checkpoint.hpp"
#include "ddh/error.hpp"
#include "ddh/grad_check.hpp"
#include "ddh/losses.hpp"
#include "ddh/network.hpp"
#include "ddh/optimizer.hpp"
#include "ddh/rng.hpp"
#include "test_util.hpp"

using namespace ddh;

namespace {

NetworkSpec dense_spec(std::size_t n) {
  NetworkSpec s;
  s.input_height = 1;
  s.input_width = 1;
  s.input_channels = n;
  s.code_width = n;
  s.layers = {DenseLayer{n}};
  return s;
}

NetworkSpec tiny_conv_spec() {
  NetworkSpec s;
  s.input_height = s.input_width = 8;
  s.input_channels = 1;
  s.code_width = 16;
  s.layers = {ConvLayer{3, 3, 4, 1}, ActivationLayer{Activation::tanh}, MaxPoolLayer{2},
              DenseLayer{16}, ActivationLayer{Activation::linear}};
  return s;
}

}  // namespace

TEST_CASE("tensor basics") {
  Tensor t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.at(1, 2) == 1.5);
  t.at(1, 2) = 4.0;
  CHECK(t.row(1)[2] == 4.0);
  CHECK_THROWS(Tensor({2, 2}, std::vector<double>(3)));
  CHECK(t.reshaped({3, 2}).at(2, 1) == 4.0);
  CHECK_THROWS(t.reshaped({4, 2}));
  CHECK(t.all_finite());
  t[0] = NAN;
  CHECK_FALSE(t.all_finite());
}

TEST_CASE("build_network is deterministic and matches the presets") {
  const auto spec = NetworkSpec::student();
  const Network a = build_network(spec, 11);
  const Network b = build_network(spec, 11);
  CHECK(a == b);
  CHECK(a.checksum() == b.checksum());
  CHECK_FALSE(a == build_network(spec, 12));
  CHECK(spec.layer_shapes().back() == Shape{128});
  CHECK(NetworkSpec::teacher().layer_shapes().back() == Shape{128});
}

TEST_CASE("initialisation follows the Glorot bound with zero biases") {
  const Network net = build_network(NetworkSpec::student(), 5);
  for (const auto& p : net.parameters()) {
    if (p.value.rank() == 1) {
      for (double v : p.value.values()) CHECK(v == 0.0);
      continue;
    }
    std::size_t fan_in = 1;
    for (std::size_t d = 0; d + 1 < p.value.rank(); ++d) fan_in *= p.value.dim(d);
    std::size_t fan_out = p.value.shape().back();
    if (p.value.rank() == 4) {
      // conv kernels: kh x kw x cin x cout
      fan_out *= p.value.dim(0) * p.value.dim(1);
    }
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (double v : p.value.values()) CHECK(std::abs(v) <= bound);
  }
}

TEST_CASE("incompatible layer chains are spec errors") {
  NetworkSpec s = tiny_conv_spec();
  s.layers.insert(s.layers.begin() + 3, DenseLayer{16, 99});
  CHECK_THROWS_AS(build_network(s, 1), SpecError);

  NetworkSpec wrong_code = tiny_conv_spec();
  wrong_code.code_width = 32;
  CHECK_THROWS_AS(build_network(wrong_code, 1), SpecError);

  NetworkSpec conv_after_fc = tiny_conv_spec();
  conv_after_fc.layers.push_back(ConvLayer{});
  CHECK_THROWS_AS(conv_after_fc.validate(), SpecError);
}

TEST_CASE("identity dense layer passes input through") {
  Network net = build_network(dense_spec(5), 3);
  auto& w = net.parameters()[0].value;
  w.fill(0.0);
  for (std::size_t i = 0; i < 5; ++i) w.at(i, i) = 1.0;
  Tensor x({2, 1, 1, 5}, std::vector<double>{1, -2, 3, -4, 5, 0.5, 0.25, 0, -1, 9});
  const Tensor y = forward(net, x);
  REQUIRE(y.shape() == Shape{2, 5});
  for (std::size_t i = 0; i < 10; ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("forward shapes, zero weights and shape errors") {
  Network net = build_network(NetworkSpec::student(), 2);
  Tensor batch({7, 64, 64, 1}, 0.3);
  CHECK(forward(net, batch).shape() == Shape{7, 128});

  for (auto& p : net.parameters()) p.value.fill(0.0);
  const Tensor zeros = forward(net, batch);
  for (double v : zeros.values()) CHECK(v == 0.0);

  CHECK_THROWS_AS(forward(net, Tensor({2, 32, 32, 1})), InputError);
}

TEST_CASE("f32 forward tracks f64 forward") {
  const Network net = build_network(NetworkSpec::student(), 9);
  const Tensor batch = test_util::random_tensor({3, 64, 64, 1}, 4, 0.0, 1.0);
  const Tensor a = forward(net, batch, Precision::f64);
  const Tensor b = forward(net, batch, Precision::f32);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == doctest::Approx(a[i]).epsilon(1e-3).scale(1.0));
}

TEST_CASE("gradients vanish at the quantization minimum") {
  Network net = build_network(dense_spec(4), 3);
  auto& w = net.parameters()[0].value;
  w.fill(0.0);
  for (std::size_t i = 0; i < 4; ++i) w.at(i, i) = 1.0;
  Tensor x({2, 1, 1, 4}, std::vector<double>{1, -1, 1, 1, -1, -1, 1, -1});
  const auto r = gradients(net, x, [](const Tensor& f) { return quantization_loss(f); });
  CHECK(r.loss == 0.0);
  for (const auto& g : r.grads.tensors)
    for (double v : g.values()) CHECK(v == 0.0);
}

TEST_CASE("gradients of parameters without influence are exactly zero") {
  // Only output 0 enters the objective, so weight columns 1..3 get nothing.
  Network net = build_network(dense_spec(4), 8);
  const Tensor x = test_util::random_tensor({3, 1, 1, 4}, 2, -1.0, 1.0);
  const auto r = gradients(net, x, [](const Tensor& f) {
    LossEval e;
    e.grad = Tensor(f.shape(), 0.0);
    for (std::size_t i = 0; i < f.dim(0); ++i) {
      e.value += f.at(i, 0);
      e.grad.at(i, 0) = 1.0;
    }
    return e;
  });
  const Tensor& gw = r.grads.tensors[0];
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 1; j < 4; ++j) CHECK(gw.at(i, j) == 0.0);
  CHECK(r.grads.tensors[1][1] == 0.0);
  CHECK(r.grads.tensors[1][0] == 3.0);
}

TEST_CASE("non-finite objective is a numeric error") {
  const Network net = build_network(tiny_conv_spec(), 1);
  const Tensor x = test_util::random_tensor({2, 8, 8, 1}, 1, -1.0, 1.0);
  const FeatureObjective bad = [](const Tensor& f) {
    LossEval e;
    e.value = std::numeric_limits<double>::infinity();
    e.grad = Tensor(f.shape(), 0.0);
    return e;
  };
  CHECK_THROWS_AS(gradients(net, x, bad), NumericError);
}

TEST_CASE("dhn gradient on a tiny network matches central differences") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const Network net = build_network(tiny_conv_spec(), seed);
    const Tensor x = test_util::random_tensor({6, 8, 8, 1}, seed + 100, -1.0, 1.0);
    const PairLabels s({0, 0, 1, 1, 2, 2});
    LossConfig cfg;
    cfg.margin = 4.0;
    const FeatureObjective obj = [&](const Tensor& f) { return dhn_loss(f, s, cfg); };
    const auto r = check_gradients(net, x, obj, seed);
    if (r.rejected) continue;
    CHECK(r.checked == 100);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("optimizer steps") {
  Network net = build_network(dense_spec(1), 1);
  net.parameters()[0].value[0] = 1.0;
  Gradients g;
  g.tensors = {Tensor({1, 1}, 0.5), Tensor({1}, 0.0)};

  SUBCASE("sgd") {
    auto st = make_optimizer(OptimizerMethod::sgd, 0.1);
    optimizer_step(net, g, st);
    CHECK(net.parameters()[0].value[0] == doctest::Approx(0.95).epsilon(1e-15));
    CHECK(net.parameters()[1].value[0] == 0.0);
    CHECK(st.step == 1);
  }
  SUBCASE("adam first step") {
    auto st = make_optimizer(OptimizerMethod::adam, 0.01);
    optimizer_step(net, g, st);
    // m_hat = g, v_hat = g^2 at t = 1
    const double expect = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
    CHECK(net.parameters()[0].value[0] == doctest::Approx(expect).epsilon(1e-14));
    REQUIRE(st.first_moment.size() == 2);
    CHECK(st.first_moment[0].shape() == net.parameters()[0].value.shape());
  }
  SUBCASE("shape mismatch") {
    auto st = make_optimizer(OptimizerMethod::sgd, 0.1);
    Gradients bad;
    bad.tensors = {Tensor({2, 1}, 0.0), Tensor({1}, 0.0)};
    CHECK_THROWS_AS(optimizer_step(net, bad, st), InputError);
    bad.tensors.pop_back();
    CHECK_THROWS_AS(optimizer_step(net, bad, st), InputError);
  }
  CHECK_THROWS_AS(make_optimizer(OptimizerMethod::adam, 0.0), ConfigError);
}

TEST_CASE("training steps are deterministic") {
  auto run = [] {
    Network net = build_network(tiny_conv_spec(), 4);
    auto st = make_optimizer(OptimizerMethod::adam, 1e-3);
    const PairLabels s({0, 0, 1, 1});
    const Tensor x = test_util::random_tensor({4, 8, 8, 1}, 5, 0.0, 1.0);
    LossConfig cfg;
    for (int i = 0; i < 5; ++i) {
      const auto r = gradients(net, x, [&](const Tensor& f) { return dhn_loss(f, s, cfg); });
      optimizer_step(net, r.grads, st);
    }
    return net;
  };
  CHECK(run() == run());
}

TEST_CASE("checkpoint roundtrip") {
  test_util::TempDir dir;
  Network net = build_network(NetworkSpec::student(), 21);
  auto st = make_optimizer(OptimizerMethod::adam, 1e-3);
  const Tensor x = test_util::random_tensor({2, 64, 64, 1}, 6, 0.0, 1.0);
  const auto r = gradients(net, x, [](const Tensor& f) { return quantization_loss(f); });
  optimizer_step(net, r.grads, st);

  const auto path = dir.path / "net.ckpt";
  save_checkpoint(net, st, path);
  const Checkpoint back = load_checkpoint(path);
  CHECK(back.network == net);
  CHECK(back.network.seed() == net.seed());
  CHECK(back.optimizer == st);
  CHECK(forward(back.network, x) == forward(net, x));

  CHECK_THROWS_AS(load_checkpoint(path, 64), SpecError);
  CHECK_NOTHROW(load_checkpoint(path, 128));

  SUBCASE("bad magic") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
    f.close();
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  }
  SUBCASE("truncated") {
    std::filesystem::resize_file(path, std::filesystem::file_size(path) / 2);
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  }
  SUBCASE("wrong version") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    const char v[4] = {9, 0, 0, 0};
    f.write(v, 4);
    f.close();
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  }
}
