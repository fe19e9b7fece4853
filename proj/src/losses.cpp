#include "ddh/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ddh/error.hpp"

namespace ddh {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw InputError(std::string(what) + " must be an N x D matrix, got " + shape_string(t.shape()));
}

void require_pairs(const Tensor& t, const char* what) {
  require_matrix(t, what);
  if (t.dim(0) < 2) throw InputError(std::string(what) + " needs at least 2 items");
}

void require_same(const Tensor& teacher, const Tensor& student) {
  require_matrix(teacher, "teacher features");
  require_matrix(student, "student features");
  if (teacher.shape() != student.shape()) {
    throw InputError("teacher features " + shape_string(teacher.shape()) + " and student features " +
                     shape_string(student.shape()) + " differ in shape");
  }
}

void require_labels(const Tensor& f, const PairLabels& s) {
  if (s.size() != f.dim(0)) {
    throw InputError("pair labels cover " + std::to_string(s.size()) + " items, batch has " +
                     std::to_string(f.dim(0)));
  }
}

double distance(const Tensor& f, std::size_t i, std::size_t j) {
  const auto a = f.row(i), b = f.row(j);
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double diff = a[k] - b[k];
    acc += diff * diff;
  }
  return std::sqrt(acc);
}

double squared_distance(const Tensor& f, std::size_t i, std::size_t j) {
  const auto a = f.row(i), b = f.row(j);
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double diff = a[k] - b[k];
    acc += diff * diff;
  }
  return acc;
}

// grad_i += c * (h_i - h_j); grad_j -= c * (h_i - h_j)
void add_pair_grad(const Tensor& f, std::size_t i, std::size_t j, double c, Tensor& grad) {
  if (c == 0.0) return;
  const auto a = f.row(i), b = f.row(j);
  auto gi = grad.row(i), gj = grad.row(j);
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double v = c * (a[k] - b[k]);
    gi[k] += v;
    gj[k] -= v;
  }
}

// Gradient of c * d_ij with d Euclidean; subgradient 0 at d = 0.
void add_distance_grad(const Tensor& f, std::size_t i, std::size_t j, double d, double c, Tensor& grad) {
  if (d > 0.0) add_pair_grad(f, i, j, c / d, grad);
}

}  // namespace

std::string to_string(DistanceKind k) { return k == DistanceKind::squared ? "squared" : "euclidean"; }

DistanceKind distance_kind_from_string(const std::string& s) {
  if (s == "squared") return DistanceKind::squared;
  if (s == "euclidean") return DistanceKind::euclidean;
  throw ConfigError("unknown distance '" + s + "' (expected squared or euclidean)");
}

void LossConfig::validate() const {
  auto finite = [](double v) { return std::isfinite(v); };
  if (!(margin > 0.0) || !finite(margin)) throw ConfigError("margin must be positive");
  if (!(quant_weight >= 0.0) || !finite(quant_weight)) throw ConfigError("quantization weight must be >= 0");
  if (!(alpha >= 0.0) || !finite(alpha)) throw ConfigError("alpha must be >= 0");
  if (!(beta >= 0.0) || !finite(beta)) throw ConfigError("beta must be >= 0");
  if (!(temperature > 0.0) || !finite(temperature)) throw ConfigError("temperature must be positive");
  if (!(direct_weight >= 0.0) || !finite(direct_weight)) throw ConfigError("direct weight must be >= 0");
  if (!(hinton_weight >= 0.0) || !finite(hinton_weight)) throw ConfigError("soft-label weight must be >= 0");
}

PairLabels::PairLabels(std::vector<std::size_t> classes) : classes_(std::move(classes)) {}

std::size_t PairLabels::genuine_count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < classes_.size(); ++i) {
    for (std::size_t j = i + 1; j < classes_.size(); ++j) n += genuine(i, j) ? 1 : 0;
  }
  return n;
}

std::size_t PairLabels::imposter_count() const {
  const std::size_t n = classes_.size();
  return n * (n - (n ? 1 : 0)) / 2 - genuine_count();
}

DistanceMatrices pairwise_distances(const Tensor& features) {
  require_pairs(features, "features");
  const std::size_t n = features.dim(0);
  DistanceMatrices m{Tensor({n, n}), Tensor({n, n})};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double sq = squared_distance(features, i, j);
      m.squared.at(i, j) = m.squared.at(j, i) = sq;
      m.d.at(i, j) = m.d.at(j, i) = std::sqrt(sq);
    }
  }
  return m;
}

LossEval hashing_loss(const Tensor& features, const PairLabels& s, double margin, DistanceKind kind) {
  require_pairs(features, "features");
  require_labels(features, s);
  if (!(margin > 0.0)) throw InputError("margin must be positive");
  const std::size_t n = features.dim(0);
  LossEval out{0.0, Tensor(features.shape()), kInf};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double sq = squared_distance(features, i, j);
      const double dist = kind == DistanceKind::squared ? sq : std::sqrt(sq);
      if (kind == DistanceKind::euclidean) out.kink_margin = std::min(out.kink_margin, dist);
      if (s.genuine(i, j)) {
        out.value += 0.5 * dist;
        if (kind == DistanceKind::squared) {
          add_pair_grad(features, i, j, 1.0, out.grad);
        } else {
          add_distance_grad(features, i, j, dist, 0.5, out.grad);
        }
      } else {
        out.kink_margin = std::min(out.kink_margin, std::abs(margin - dist));
        if (dist < margin) {
          out.value += 0.5 * (margin - dist);
          if (kind == DistanceKind::squared) {
            add_pair_grad(features, i, j, -1.0, out.grad);
          } else {
            add_distance_grad(features, i, j, dist, -0.5, out.grad);
          }
        }
      }
    }
  }
  return out;
}

LossEval quantization_loss(const Tensor& features) {
  require_matrix(features, "features");
  const std::size_t n = features.dim(0), dim = features.dim(1);
  LossEval out{0.0, Tensor(features.shape()), kInf};
  for (std::size_t i = 0; i < n; ++i) {
    const auto h = features.row(i);
    double acc = 0.0;
    for (double v : h) {
      const double r = std::abs(v) - 1.0;
      acc += r * r;
      out.kink_margin = std::min(out.kink_margin, std::abs(v));
    }
    const double norm = std::sqrt(acc);
    out.value += norm;
    out.kink_margin = std::min(out.kink_margin, norm);
    if (norm == 0.0) continue;
    auto g = out.grad.row(i);
    for (std::size_t k = 0; k < dim; ++k) {
      const double v = h[k];
      const double sign = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
      g[k] = (std::abs(v) - 1.0) / norm * sign;
    }
  }
  return out;
}

LossEval dhn_loss(const Tensor& features, const PairLabels& s, const LossConfig& cfg) {
  LossEval out = hashing_loss(features, s, cfg.margin, cfg.hashing_distance);
  if (cfg.quant_weight != 0.0) {
    const LossEval q = quantization_loss(features);
    out.value += cfg.quant_weight * q.value;
    for (std::size_t k = 0; k < out.grad.size(); ++k) out.grad[k] += cfg.quant_weight * q.grad[k];
    out.kink_margin = std::min(out.kink_margin, q.kink_margin);
  }
  return out;
}

Tensor soft_labels(const Tensor& logits, double temperature) {
  require_matrix(logits, "logits");
  if (!(temperature > 0.0)) throw InputError("temperature must be positive");
  Tensor q(logits.shape());
  for (std::size_t i = 0; i < logits.dim(0); ++i) {
    const auto z = logits.row(i);
    auto p = q.row(i);
    const double top = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) {
      p[k] = std::exp((z[k] - top) / temperature);
      sum += p[k];
    }
    for (double& v : p) v /= sum;
  }
  return q;
}

LossEval soft_label_loss(const Tensor& teacher_logits, const Tensor& student_logits, double temperature) {
  require_same(teacher_logits, student_logits);
  const Tensor qt = soft_labels(teacher_logits, temperature);
  const Tensor qs = soft_labels(student_logits, temperature);
  LossEval out{0.0, Tensor(student_logits.shape()), kInf};
  const double t2 = temperature * temperature;
  for (std::size_t i = 0; i < qt.dim(0); ++i) {
    const auto zs = student_logits.row(i);
    const double top = *std::max_element(zs.begin(), zs.end());
    double sum = 0.0;
    for (double z : zs) sum += std::exp((z - top) / temperature);
    const double log_norm = std::log(sum);
    const auto pt = qt.row(i), ps = qs.row(i);
    auto g = out.grad.row(i);
    for (std::size_t k = 0; k < pt.size(); ++k) {
      if (pt[k] > 0.0) {
        const double log_ps = (zs[k] - top) / temperature - log_norm;
        out.value += t2 * pt[k] * (std::log(pt[k]) - log_ps);
      }
      g[k] = temperature * (ps[k] - pt[k]);
    }
  }
  return out;
}

LossEval direct_distill_loss(const Tensor& teacher, const Tensor& student) {
  require_same(teacher, student);
  LossEval out{0.0, Tensor(student.shape()), kInf};
  for (std::size_t i = 0; i < student.dim(0); ++i) {
    const auto t = teacher.row(i), s = student.row(i);
    double acc = 0.0;
    for (std::size_t k = 0; k < s.size(); ++k) acc += (t[k] - s[k]) * (t[k] - s[k]);
    const double norm = std::sqrt(acc);
    out.value += norm;
    out.kink_margin = std::min(out.kink_margin, norm);
    if (norm == 0.0) continue;
    auto g = out.grad.row(i);
    for (std::size_t k = 0; k < s.size(); ++k) g[k] = (s[k] - t[k]) / norm;
  }
  return out;
}

LossEval relative_distill_loss(const Tensor& teacher, const Tensor& student, bool squared, bool average) {
  require_same(teacher, student);
  require_pairs(student, "student features");
  const std::size_t n = student.dim(0);
  const double scale = average ? 2.0 / static_cast<double>(n * (n - 1)) : 1.0;
  LossEval out{0.0, Tensor(student.shape()), kInf};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dt = distance(teacher, i, j);
      const double ds = distance(student, i, j);
      const double diff = dt - ds;
      out.kink_margin = std::min(out.kink_margin, ds);
      double dloss_dds;
      if (squared) {
        out.value += scale * diff * diff;
        dloss_dds = -2.0 * diff;
      } else {
        out.value += scale * std::abs(diff);
        out.kink_margin = std::min(out.kink_margin, std::abs(diff));
        dloss_dds = diff > 0.0 ? -1.0 : (diff < 0.0 ? 1.0 : 0.0);
      }
      add_distance_grad(student, i, j, ds, scale * dloss_dds, out.grad);
    }
  }
  return out;
}

LossEval hard_distill_loss(const Tensor& teacher, const Tensor& student, const PairLabels& s) {
  require_same(teacher, student);
  require_pairs(student, "student features");
  require_labels(student, s);
  const std::size_t n = student.dim(0);
  LossEval out{0.0, Tensor(student.shape()), kInf};

  struct Extreme {
    double value;
    double runner_up;
    std::size_t i = 0, j = 0;
    bool found = false;
  };
  // Student genuine max and imposter min carry the gradient; ties keep the
  // first pair in (i, j) lexicographic order.
  Extreme s_gen_max{-kInf, -kInf}, s_imp_min{kInf, kInf};
  double t_gen_min = kInf, t_imp_max = -kInf;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dt = distance(teacher, i, j);
      const double ds = distance(student, i, j);
      if (s.genuine(i, j)) {
        t_gen_min = std::min(t_gen_min, dt);
        if (ds > s_gen_max.value) {
          s_gen_max.runner_up = s_gen_max.value;
          s_gen_max = {ds, s_gen_max.runner_up, i, j, true};
        } else {
          s_gen_max.runner_up = std::max(s_gen_max.runner_up, ds);
        }
      } else {
        t_imp_max = std::max(t_imp_max, dt);
        if (ds < s_imp_min.value) {
          s_imp_min.runner_up = s_imp_min.value;
          s_imp_min = {ds, s_imp_min.runner_up, i, j, true};
        } else {
          s_imp_min.runner_up = std::min(s_imp_min.runner_up, ds);
        }
      }
    }
  }
  if (s_gen_max.found) {
    const double arg = s_gen_max.value - t_gen_min;
    out.kink_margin = std::min(out.kink_margin, std::abs(arg));
    if (arg > 0.0) {
      out.value += arg;
      out.kink_margin = std::min({out.kink_margin, s_gen_max.value - s_gen_max.runner_up, s_gen_max.value});
      add_distance_grad(student, s_gen_max.i, s_gen_max.j, s_gen_max.value, 1.0, out.grad);
    }
  }
  if (s_imp_min.found) {
    const double arg = t_imp_max - s_imp_min.value;
    out.kink_margin = std::min(out.kink_margin, std::abs(arg));
    if (arg > 0.0) {
      out.value += arg;
      out.kink_margin = std::min({out.kink_margin, s_imp_min.runner_up - s_imp_min.value, s_imp_min.value});
      add_distance_grad(student, s_imp_min.i, s_imp_min.j, s_imp_min.value, -1.0, out.grad);
    }
  }
  return out;
}

StudentLoss total_student_loss(const Tensor& student, const Tensor& teacher, const PairLabels& s,
                               const LossConfig& cfg, const StudentTerms& terms) {
  StudentLoss out;
  const LossEval hash = hashing_loss(student, s, cfg.margin, cfg.hashing_distance);
  const LossEval quant = quantization_loss(student);
  out.terms.hashing = hash.value;
  out.terms.quantization = quant.value;
  out.terms.dhn = hash.value + cfg.quant_weight * quant.value;
  out.eval = LossEval{out.terms.dhn, hash.grad, std::min(hash.kink_margin, quant.kink_margin)};
  auto& grad = out.eval.grad;
  if (cfg.quant_weight != 0.0) {
    for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += cfg.quant_weight * quant.grad[k];
  }
  // Terms with zero weight are reported but contribute nothing, so the
  // objective reduces exactly to L_DHN.
  auto add = [&](const LossEval& term, double weight, double& slot) {
    slot = term.value;
    if (weight == 0.0) return;
    out.eval.value += weight * term.value;
    for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += weight * term.grad[k];
    out.eval.kink_margin = std::min(out.eval.kink_margin, term.kink_margin);
  };
  if (terms.direct) add(direct_distill_loss(teacher, student), cfg.direct_weight, out.terms.direct);
  if (terms.relative) {
    add(relative_distill_loss(teacher, student, cfg.rela_squared, cfg.rela_average), cfg.alpha, out.terms.relative);
  }
  if (terms.hard) add(hard_distill_loss(teacher, student, s), cfg.beta, out.terms.hard);
  if (terms.soft_label) {
    add(soft_label_loss(teacher, student, cfg.temperature), cfg.hinton_weight, out.terms.soft_label);
  }
  out.terms.total = out.eval.value;
  return out;
}

}  // namespace ddh
