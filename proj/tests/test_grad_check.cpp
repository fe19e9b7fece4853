#include <doctest.h>

#include "ddh/grad_check.hpp"

using namespace ddh;

TEST_CASE("every loss passes the finite-difference check") {
  const auto summary = run_grad_check_suite(3, 4);
  REQUIRE(summary.size() == all_checked_losses().size());
  for (const auto& s : summary) {
    INFO(to_string(s.loss));
    CHECK(s.instances == 4);
    CHECK(s.max_rel_error < 1e-4);
  }
}

TEST_CASE("a wrong gradient is caught") {
  std::uint64_t seed = 5;
  auto inst = make_grad_check_instance(CheckedLoss::quantization, seed, false);
  while (check_gradients(inst.net, inst.batch, objective_for(CheckedLoss::quantization, inst), 1).rejected) {
    inst = make_grad_check_instance(CheckedLoss::quantization, ++seed, false);
  }
  const FeatureObjective right = objective_for(CheckedLoss::quantization, inst);
  const FeatureObjective wrong = [&](const Tensor& f) {
    LossEval e = right(f);
    for (auto& g : e.grad.values()) g *= 1.01;
    return e;
  };
  const auto ok = check_gradients(inst.net, inst.batch, right, 1);
  const auto bad = check_gradients(inst.net, inst.batch, wrong, 1);
  REQUIRE_FALSE(ok.rejected);
  CHECK(ok.max_rel_error < 1e-4);
  CHECK(bad.max_rel_error > 5e-3);
}

TEST_CASE("instances near a kink are rejected") {
  const auto inst = make_grad_check_instance(CheckedLoss::hashing, 2, false);
  const FeatureObjective at_kink = [](const Tensor& f) {
    LossEval e{0.0, Tensor(f.shape(), 0.0)};
    e.kink_margin = 1e-5;
    return e;
  };
  const auto r = check_gradients(inst.net, inst.batch, at_kink, 1);
  CHECK(r.rejected);
  CHECK(r.checked == 0);
}
