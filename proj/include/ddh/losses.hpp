#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "ddh/objective.hpp"
#include "ddh/tensor.hpp"

namespace ddh {

// Distance used inside the pairwise hashing loss.
enum class DistanceKind { squared, euclidean };

std::string to_string(DistanceKind k);
DistanceKind distance_kind_from_string(const std::string& s);

struct LossConfig {
  double margin = 180.0;        // t
  double quant_weight = 0.01;   // w
  double alpha = 1.0;           // relative term
  double beta = 0.8;            // hard term
  double temperature = 4.0;     // soft-label baseline only
  double direct_weight = 1.0;   // L_dir when enabled
  double hinton_weight = 1.0;   // soft-label term when enabled
  DistanceKind hashing_distance = DistanceKind::squared;
  bool rela_squared = false;
  bool rela_average = false;

  // Throws ConfigError on out-of-range values.
  void validate() const;
};

// Pair labels derived from per-item class ids: S_ij = 1 iff classes match.
class PairLabels {
 public:
  PairLabels() = default;
  explicit PairLabels(std::vector<std::size_t> classes);

  std::size_t size() const { return classes_.size(); }
  bool genuine(std::size_t i, std::size_t j) const { return classes_[i] == classes_[j]; }
  double s(std::size_t i, std::size_t j) const { return genuine(i, j) ? 1.0 : 0.0; }
  std::size_t genuine_count() const;
  std::size_t imposter_count() const;
  const std::vector<std::size_t>& classes() const { return classes_; }

 private:
  std::vector<std::size_t> classes_;
};

// Full N x N matrices; `d` is Euclidean, `squared` its elementwise square.
struct DistanceMatrices {
  Tensor squared;
  Tensor d;
};

DistanceMatrices pairwise_distances(const Tensor& features);

// Sum over i<j of S/2 * D + (1-S)/2 * max(t - D, 0).
LossEval hashing_loss(const Tensor& features, const PairLabels& s, double margin,
                      DistanceKind kind = DistanceKind::squared);
// Sum over items of || |h_i| - 1 ||_2.
LossEval quantization_loss(const Tensor& features);
LossEval dhn_loss(const Tensor& features, const PairLabels& s, const LossConfig& cfg);

// Row-wise softmax of logits / T.
Tensor soft_labels(const Tensor& logits, double temperature);
// T^2 * sum_i KL(softmax(teacher_i/T) || softmax(student_i/T)), gradient with
// respect to the student logits.
LossEval soft_label_loss(const Tensor& teacher_logits, const Tensor& student_logits, double temperature);

// Teacher arguments are constants: gradients are with respect to the student.
LossEval direct_distill_loss(const Tensor& teacher, const Tensor& student);
LossEval relative_distill_loss(const Tensor& teacher, const Tensor& student, bool squared = false,
                               bool average = false);
LossEval hard_distill_loss(const Tensor& teacher, const Tensor& student, const PairLabels& s);

// Optional terms of the student objective. The defaults give
// L_DHN + alpha * L_rela + beta * L_hard.
struct StudentTerms {
  bool direct = false;
  bool relative = true;
  bool hard = true;
  bool soft_label = false;
};

struct LossBreakdown {
  double hashing = 0.0;
  double quantization = 0.0;
  double dhn = 0.0;
  double direct = 0.0;
  double relative = 0.0;
  double hard = 0.0;
  double soft_label = 0.0;
  double total = 0.0;
};

struct StudentLoss {
  LossEval eval;
  LossBreakdown terms;
};

StudentLoss total_student_loss(const Tensor& student, const Tensor& teacher, const PairLabels& s,
                               const LossConfig& cfg, const StudentTerms& terms = {});

}  // namespace ddh
