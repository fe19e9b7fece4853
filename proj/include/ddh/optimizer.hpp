#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ddh/network.hpp"

namespace ddh {

enum class OptimizerMethod { sgd, adam };

std::string to_string(OptimizerMethod m);
OptimizerMethod optimizer_from_string(const std::string& s);

struct OptimizerState {
  OptimizerMethod method = OptimizerMethod::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  // Adam moments, shaped like the parameters; empty until the first step.
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;

  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

OptimizerState make_optimizer(OptimizerMethod method, double learning_rate);

// sgd:  p <- p - lr * g
// adam: bias-corrected first/second moment update.
void optimizer_step(Network& net, const Gradients& grads, OptimizerState& state);

}  // namespace ddh
