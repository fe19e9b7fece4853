#include "ddh/evaluation.hpp"

#include <array>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "ddh/error.hpp"

namespace ddh {

namespace {

constexpr int kMaxDistance = static_cast<int>(kCodeBits);

void require_scores(const ScoreSet& s) {
  if (s.genuine.empty()) throw InputError("score set has no genuine scores");
  if (s.imposter.empty()) throw InputError("score set has no imposter scores");
}

void require_inputs(const Gallery& gallery, std::span<const Probe> probes) {
  if (gallery.empty()) throw InputError("gallery is empty");
  if (probes.empty()) throw InputError("no probes");
}

// cumulative[t] = number of scores <= t
std::array<std::size_t, kMaxDistance + 1> cumulative_counts(const std::vector<int>& scores) {
  std::array<std::size_t, kMaxDistance + 1> hist{};
  for (int d : scores) {
    if (d < 0 || d > kMaxDistance) throw InputError("score " + std::to_string(d) + " outside [0, 128]");
    ++hist[static_cast<std::size_t>(d)];
  }
  for (std::size_t t = 1; t < hist.size(); ++t) hist[t] += hist[t - 1];
  return hist;
}

}  // namespace

ScoreSet collect_scores(const Gallery& gallery, std::span<const Probe> probes) {
  require_inputs(gallery, probes);
  ScoreSet s;
  const auto& codes = gallery.codes();
  const auto& labels = gallery.labels();
  for (const auto& p : probes) {
    for (std::size_t i = 0; i < codes.size(); ++i) {
      const int d = hamming(codes[i], p.code);
      (labels[i] == p.label ? s.genuine : s.imposter).push_back(d);
    }
  }
  return s;
}

std::vector<RatePoint> far_frr_curve(const ScoreSet& scores) {
  require_scores(scores);
  const auto gen = cumulative_counts(scores.genuine);
  const auto imp = cumulative_counts(scores.imposter);
  const auto ng = static_cast<double>(scores.genuine.size());
  const auto ni = static_cast<double>(scores.imposter.size());
  std::vector<RatePoint> curve;
  curve.reserve(kMaxDistance + 1);
  for (int t = 0; t <= kMaxDistance; ++t) {
    const auto k = static_cast<std::size_t>(t);
    curve.push_back({t, static_cast<double>(imp[k]) / ni, static_cast<double>(scores.genuine.size() - gen[k]) / ng});
  }
  return curve;
}

EerResult eer(const ScoreSet& scores) {
  const auto curve = far_frr_curve(scores);
  RatePoint prev{-1, 0.0, 1.0};
  for (const auto& p : curve) {
    const double diff = p.far - p.frr;
    if (diff == 0.0) return {p.far, static_cast<double>(p.threshold)};
    if (diff > 0.0) {
      const double prev_diff = prev.far - prev.frr;
      const double lambda = -prev_diff / (diff - prev_diff);
      return {prev.far + lambda * (p.far - prev.far), static_cast<double>(prev.threshold) + lambda};
    }
    prev = p;
  }
  // FAR(128) = 1 and FRR(128) = 0, so the loop always returns.
  throw StateError("FAR/FRR curve has no crossing");
}

double identification_accuracy(const Gallery& gallery, std::span<const Probe> probes) {
  require_inputs(gallery, probes);
  std::size_t hits = 0;
  for (const auto& p : probes) hits += identify(gallery, p.code).label == p.label ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(probes.size());
}

std::string format_real(double v) {
  char buf[32];
  for (int precision = 9; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%#.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

void export_roc(const ScoreSet& scores, const std::filesystem::path& path) {
  const auto curve = far_frr_curve(scores);
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "threshold,far,frr\n";
  for (const auto& p : curve) os << p.threshold << ',' << format_real(p.far) << ',' << format_real(p.frr) << '\n';
  if (!os.flush()) throw IoError("failed writing " + path.string());
}

EvaluationSummary summarize(const Gallery& gallery, std::span<const Probe> probes) {
  const ScoreSet scores = collect_scores(gallery, probes);
  const EerResult e = eer(scores);
  return {identification_accuracy(gallery, probes), e.eer, e.threshold, scores.genuine.size(),
          scores.imposter.size()};
}

std::string format_summary(const EvaluationSummary& s) {
  std::ostringstream os;
  os << "accuracy=" << format_real(s.accuracy) << '\n'
     << "eer=" << format_real(s.eer) << '\n'
     << "threshold_star=" << format_real(s.threshold_star) << '\n'
     << "genuine_count=" << s.genuine_count << '\n'
     << "imposter_count=" << s.imposter_count << '\n';
  return os.str();
}

}  // namespace ddh
