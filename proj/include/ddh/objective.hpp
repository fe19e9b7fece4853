#pragma once

#include <limits>

#include "ddh/tensor.hpp"

namespace ddh {

// Value of a scalar objective together with its gradient with respect to the
// feature batch it was evaluated on.
struct LossEval {
  double value = 0.0;
  Tensor grad;
  // Distance of the evaluation point to the nearest place where the objective
  // is not differentiable (hinge corner, tied max, zero norm). Finite
  // difference checks skip points closer than their step.
  double kink_margin = std::numeric_limits<double>::infinity();
};

}  // namespace ddh
