#include "ddh/optimizer.hpp"

#include <cmath>


#include "ddh/error.hpp"

namespace ddh {

std::string to_string(OptimizerMethod m) { return m == OptimizerMethod::sgd ? "sgd" : "adam"; }

OptimizerMethod optimizer_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerMethod::sgd;
  if (s == "adam") return OptimizerMethod::adam;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd or adam)");
}

OptimizerState make_optimizer(OptimizerMethod method, double learning_rate) {
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  OptimizerState s;
  s.method = method;
  s.learning_rate = learning_rate;
  return s;
}

void optimizer_step(Network& net, const Gradients& grads, OptimizerState& state) {
  auto& params = net.parameters();
  if (grads.tensors.size() != params.size()) {
    throw InputError("gradient count " + std::to_string(grads.tensors.size()) + " does not match parameter count " +
                     std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads.tensors[i].shape() != params[i].value.shape()) {
      throw InputError("gradient for " + params[i].name + " has shape " + shape_string(grads.tensors[i].shape()) +
                       ", expected " + shape_string(params[i].value.shape()));
    }
  }
  ++state.step;
  const double lr = state.learning_rate;
  if (state.method == OptimizerMethod::sgd) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto p = params[i].value.values();
      const auto g = grads.tensors[i].values();
      for (std::size_t k = 0; k < p.size(); ++k) p[k] -= lr * g[k];
    }
    return;
  }

  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.value.shape(), 0.0);
      state.second_moment.emplace_back(p.value.shape(), 0.0);
    }
  }
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  const double b1 = state.beta1, b2 = state.beta2, eps = state.epsilon;
  for (std::size_t i = 0; i < params.size(); ++i) {
    double* p = params[i].value.data();
    const double* g = grads.tensors[i].data();
    double* m = state.first_moment[i].data();
    double* v = state.second_moment[i].data();
    for (std::size_t j = 0; j < params[i].value.size(); ++j) {
      m[j] = b1 * m[j] + (1.0 - b1) * g[j];
      v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
      p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
    }
  }
}

}  // namespace ddh
