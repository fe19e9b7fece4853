#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ddh/hash_match.hpp"

namespace ddh {

// Hamming distances of genuine (same label) and imposter comparisons.
struct ScoreSet {
  std::vector<int> genuine;
  std::vector<int> imposter;
};

struct Probe {
  std::string label;
  HashCode code;
};

// Every probe against every gallery entry.
ScoreSet collect_scores(const Gallery& gallery, std::span<const Probe> probes);

struct RatePoint {
  int threshold;
  double far;  // imposters with distance <= threshold
  double frr;  // genuines with distance > threshold
};

// Thresholds 0..128.
std::vector<RatePoint> far_frr_curve(const ScoreSet& scores);

struct EerResult {
  double eer;
  double threshold;  // interpolated crossing point
};

// Crossing of FAR and FRR over the integer-threshold curve, interpolating
// linearly between the bracketing thresholds. Threshold -1 (FAR 0, FRR 1)
// brackets a crossing that happens before threshold 0.
EerResult eer(const ScoreSet& scores);

double identification_accuracy(const Gallery& gallery, std::span<const Probe> probes);

// CSV "threshold,far,frr" with 129 rows.
void export_roc(const ScoreSet& scores, const std::filesystem::path& path);

struct EvaluationSummary {
  double accuracy = 0.0;
  double eer = 0.0;
  double threshold_star = 0.0;
  std::size_t genuine_count = 0;
  std::size_t imposter_count = 0;
};

EvaluationSummary summarize(const Gallery& gallery, std::span<const Probe> probes);
// key=value lines.
std::string format_summary(const EvaluationSummary& s);

// At least 9 significant digits, more when needed to read back the same double.
std::string format_real(double v);

}  // namespace ddh
