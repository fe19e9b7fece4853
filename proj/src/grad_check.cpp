#include "ddh/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "ddh/error.hpp"
#include "ddh/rng.hpp"

namespace ddh {

namespace {

constexpr std::uint64_t kTagPick = 0x7069636b;
constexpr std::uint64_t kTagInstance = 0x696e7374;
constexpr std::size_t kMaxRedraws = 5000;
// Few activations and code entries per instance, so that a random draw lies
// at least the kink threshold away from every non-smooth point reasonably
// often.
constexpr std::size_t kCheckCodeWidth = 32;

double evaluate(const Network& net, const Tensor& batch, const FeatureObjective& objective) {
  return objective(forward(net, batch)).value;
}

NetworkSpec small_spec(bool use_relu) {
  const auto act = use_relu ? Activation::relu : Activation::tanh;
  NetworkSpec spec;
  spec.input_height = 6;
  spec.input_width = 6;
  spec.input_channels = 1;
  spec.code_width = kCheckCodeWidth;
  spec.layers = {ConvLayer{3, 3, 2, 1}, ActivationLayer{act}, MaxPoolLayer{2}, DenseLayer{8}, ActivationLayer{act},
                 DenseLayer{kCheckCodeWidth}};
  return spec;
}

}  // namespace

GradCheckResult check_gradients(const Network& net, const Tensor& batch, const FeatureObjective& objective,
                                std::uint64_t seed, const GradCheckOptions& options) {
  ForwardPass pass;
  pass.set_track_margins(true);
  forward_recording(net, batch, pass);
  const LossEval base = objective(pass.output());
  const Gradients grads = backward(net, pass, base.grad);

  GradCheckResult result;
  result.loss = base.value;
  result.kink_margin = std::min(pass.min_kink_margin(), base.kink_margin);
  if (result.kink_margin < options.kink_threshold) {
    result.rejected = true;
    return result;
  }

  Network probe = net;
  auto& params = probe.parameters();
  const std::size_t total = probe.parameter_count();
  Rng rng(derive_seed(seed, {kTagPick}));
  const std::size_t n = std::min(options.samples, total);
  std::vector<std::size_t> picks(total);
  for (std::size_t i = 0; i < total; ++i) picks[i] = i;
  for (std::size_t i = 0; i < n; ++i) std::swap(picks[i], picks[i + rng.below(total - i)]);

  for (std::size_t s = 0; s < n; ++s) {
    std::size_t flat = picks[s], p = 0;
    while (flat >= params[p].value.size()) flat -= params[p++].value.size();
    double& w = params[p].value[flat];
    const double saved = w;
    w = saved + options.step;
    const double plus = evaluate(probe, batch, objective);
    w = saved - options.step;
    const double minus = evaluate(probe, batch, objective);
    w = saved;
    const double numeric = (plus - minus) / (2.0 * options.step);
    const double analytic = grads.tensors[p][flat];
    const double denom = std::max({std::abs(analytic), std::abs(numeric), options.abs_floor});
    const double rel = std::abs(analytic - numeric) / denom;
    ++result.checked;
    if (rel >= result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_parameter = params[p].name + "[" + std::to_string(flat) + "]";
      result.analytic_at_worst = analytic;
      result.numeric_at_worst = numeric;
    }
  }
  return result;
}

std::string to_string(CheckedLoss l) {
  switch (l) {
    case CheckedLoss::hashing: return "hashing";
    case CheckedLoss::quantization: return "quantization";
    case CheckedLoss::dhn: return "dhn";
    case CheckedLoss::direct: return "direct";
    case CheckedLoss::relative: return "relative";
    case CheckedLoss::hard: return "hard";
    case CheckedLoss::total: return "total";
    case CheckedLoss::soft_label: return "soft_label";
  }
  return "unknown";
}

const std::vector<CheckedLoss>& all_checked_losses() {
  static const std::vector<CheckedLoss> all = {CheckedLoss::hashing, CheckedLoss::quantization, CheckedLoss::dhn,
                                               CheckedLoss::direct,  CheckedLoss::relative,     CheckedLoss::hard,
                                               CheckedLoss::total,   CheckedLoss::soft_label};
  return all;
}

GradCheckInstance make_grad_check_instance(CheckedLoss loss, std::uint64_t seed, bool use_relu) {
  Rng rng(derive_seed(seed, {kTagInstance, static_cast<std::uint64_t>(loss)}));
  const auto spec = small_spec(use_relu);
  Network net = build_network(spec, rng.next());
  constexpr std::size_t k = 3, m = 2, n = k * m;
  Tensor batch(spec.input_shape(n));
  for (double& v : batch.values()) v = rng.uniform(-1.0, 1.0);
  std::vector<std::size_t> classes;
  for (std::size_t c = 0; c < k; ++c) classes.insert(classes.end(), m, c);

  // Teacher codes: one well-separated centre per class plus small scatter, so
  // teacher genuine distances are short and imposter distances long. That
  // keeps both hard-loss hinges active for a random student.
  const std::size_t dim = spec.code_width;
  Tensor teacher({n, dim});
  std::vector<std::vector<double>> centres(k, std::vector<double>(dim));
  for (auto& c : centres) {
    for (double& v : c) v = rng.uniform(-1.0, 1.0);
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t d = 0; d < dim; ++d) teacher.at(i, d) = centres[classes[i]][d] + 0.05 * rng.uniform(-1.0, 1.0);
  }
  LossConfig cfg;
  // Small random nets produce squared distances of order 1..10; a margin on
  // that scale keeps both sides of the imposter hinge in play.
  cfg.margin = loss == CheckedLoss::hashing || loss == CheckedLoss::dhn || loss == CheckedLoss::total ? 4.0 : 180.0;
  return {std::move(net), std::move(batch), PairLabels(std::move(classes)), std::move(teacher), cfg};
}

FeatureObjective objective_for(CheckedLoss loss, const GradCheckInstance& inst) {
  const Tensor* teacher = &inst.teacher;
  const PairLabels* labels = &inst.labels;
  const LossConfig cfg = inst.cfg;
  switch (loss) {
    case CheckedLoss::hashing:
      return [=](const Tensor& f) { return hashing_loss(f, *labels, cfg.margin, cfg.hashing_distance); };
    case CheckedLoss::quantization:
      return [](const Tensor& f) { return quantization_loss(f); };
    case CheckedLoss::dhn:
      return [=](const Tensor& f) { return dhn_loss(f, *labels, cfg); };
    case CheckedLoss::direct:
      return [=](const Tensor& f) { return direct_distill_loss(*teacher, f); };
    case CheckedLoss::relative:
      return [=](const Tensor& f) { return relative_distill_loss(*teacher, f, cfg.rela_squared, cfg.rela_average); };
    case CheckedLoss::hard:
      return [=](const Tensor& f) { return hard_distill_loss(*teacher, f, *labels); };
    case CheckedLoss::total:
      return [=](const Tensor& f) { return total_student_loss(f, *teacher, *labels, cfg).eval; };
    case CheckedLoss::soft_label:
      return [=](const Tensor& f) { return soft_label_loss(*teacher, f, cfg.temperature); };
  }
  throw InputError("unknown loss");
}

std::vector<LossCheckSummary> run_grad_check_suite(std::uint64_t seed, std::size_t instances,
                                                   const GradCheckOptions& options) {
  std::vector<LossCheckSummary> out;
  for (const auto loss : all_checked_losses()) {
    LossCheckSummary summary{loss};
    std::uint64_t draw = 0;
    while (summary.instances < instances) {
      if (draw > kMaxRedraws + instances) {
        throw NumericError("could not draw " + std::to_string(instances) + " smooth instances for " + to_string(loss));
      }
      const std::uint64_t inst_seed = derive_seed(seed, {draw++});
      const bool relu = summary.instances % 2 == 1;
      const auto inst = make_grad_check_instance(loss, inst_seed, relu);
      const auto r = check_gradients(inst.net, inst.batch, objective_for(loss, inst), inst_seed, options);
      if (r.rejected) {
        ++summary.rejected;
        continue;
      }
      ++summary.instances;
      summary.max_rel_error = std::max(summary.max_rel_error, r.max_rel_error);
    }
    out.push_back(summary);
  }
  return out;
}

}  // namespace ddh
