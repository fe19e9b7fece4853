#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "ddh/losses.hpp"
#include "ddh/network.hpp"

namespace ddh {

struct GradCheckOptions {
  double step = 1e-4;
  std::size_t samples = 100;     // parameters checked per instance
  double kink_threshold = 1e-3;  // reject instances closer than this to a kink
  // Relative error is |a - n| / max(|a|, |n|, abs_floor): components whose
  // true value is below the floor are judged on absolute error instead, since
  // central differences cannot resolve them better than roundoff.
  double abs_floor = 1e-6;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst_parameter;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  double kink_margin = 0.0;  // of the evaluation point, network and loss
  bool rejected = false;     // kink_margin below threshold; nothing checked
  double loss = 0.0;
};

// Central differences on `samples` randomly chosen parameters (uniform over
// all scalars, drawn from `seed`), in double precision. Points closer than
// kink_threshold to a non-smooth point are rejected without checking.
GradCheckResult check_gradients(const Network& net, const Tensor& batch, const FeatureObjective& objective,
                                std::uint64_t seed, const GradCheckOptions& options = {});

// Objectives covered by the gradient suite.
enum class CheckedLoss { hashing, quantization, dhn, direct, relative, hard, total, soft_label };

std::string to_string(CheckedLoss l);
const std::vector<CheckedLoss>& all_checked_losses();

// A small random network, an input batch in [-1, 1], class labels and
// constant teacher features arranged so that the loss under test has active
// terms.
struct GradCheckInstance {
  Network net;
  Tensor batch;
  PairLabels labels;
  Tensor teacher;
  LossConfig cfg;
};

GradCheckInstance make_grad_check_instance(CheckedLoss loss, std::uint64_t seed, bool use_relu);
FeatureObjective objective_for(CheckedLoss loss, const GradCheckInstance& inst);

struct LossCheckSummary {
  CheckedLoss loss;
  std::size_t instances = 0;
  std::size_t rejected = 0;  // near a kink, redrawn
  double max_rel_error = 0.0;
};

// `instances` accepted instances per loss, alternating tanh and ReLU networks.
std::vector<LossCheckSummary> run_grad_check_suite(std::uint64_t seed, std::size_t instances,
                                                   const GradCheckOptions& options = {});

}  // namespace ddh
