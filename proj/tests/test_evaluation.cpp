#include <doctest.h>

#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include "ddh/error.hpp"
#include "ddh/evaluation.hpp"
#include "ddh/rng.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace ddh;

namespace {

HashCode random_code(Rng& rng) {
  HashCode c;
  for (auto& b : c.bytes) b = static_cast<std::uint8_t>(rng.next());
  return c;
}

ScoreSet random_scores(Rng& rng, std::size_t max_total) {
  ScoreSet s;
  const std::size_t ng = 1 + rng.below(max_total / 2);
  const std::size_t ni = 1 + rng.below(max_total / 2);
  // Overlapping ranges so the crossing moves around.
  const int g_hi = 1 + static_cast<int>(rng.below(128));
  const int i_lo = static_cast<int>(rng.below(128));
  for (std::size_t k = 0; k < ng; ++k) s.genuine.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(g_hi) + 1)));
  for (std::size_t k = 0; k < ni; ++k)
    s.imposter.push_back(i_lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(129 - i_lo))));
  return s;
}

}  // namespace

TEST_CASE("collect_scores routing and counts") {
  Rng rng(3);
  Gallery g;
  g.enroll("a", random_code(rng));
  std::vector<Probe> probes{{"a", random_code(rng)}};
  auto s = collect_scores(g, probes);
  CHECK(s.genuine.size() == 1);
  CHECK(s.imposter.empty());

  probes = {{"zzz", random_code(rng)}};
  s = collect_scores(g, probes);
  CHECK(s.genuine.empty());
  CHECK(s.imposter.size() == 1);

  // C classes, m probes and n gallery entries per class.
  const std::size_t C = 6, m = 3, n = 4;
  Gallery big;
  std::vector<Probe> many;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t k = 0; k < n; ++k) big.enroll(std::to_string(c), random_code(rng));
    for (std::size_t k = 0; k < m; ++k) many.push_back({std::to_string(c), random_code(rng)});
  }
  s = collect_scores(big, many);
  CHECK(s.genuine.size() == C * m * n);
  CHECK(s.imposter.size() == C * m * (C - 1) * n);

  std::size_t gen = 0;
  for (const auto& p : many)
    for (const auto& l : big.labels()) gen += l == p.label ? 1 : 0;
  CHECK(gen == s.genuine.size());

  CHECK_THROWS_AS(collect_scores(Gallery{}, many), InputError);
  CHECK_THROWS_AS(collect_scores(big, std::vector<Probe>{}), InputError);
}

TEST_CASE("far/frr curve") {
  ScoreSet s{{5, 6, 7}, {20, 30}};
  const auto c = far_frr_curve(s);
  REQUIRE(c.size() == 129);
  CHECK(c[0].far == 0.0);
  CHECK(c[0].frr == 1.0);
  CHECK(c[128].far == 1.0);
  CHECK(c[128].frr == 0.0);
  CHECK(c[6].frr == doctest::Approx(1.0 / 3.0));
  CHECK(c[20].far == 0.5);

  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const ScoreSet r = random_scores(rng, 300);
    const auto curve = far_frr_curve(r);
    for (int t = 0; t <= 128; ++t) {
      const auto want = oracle::rates_at(r, t);
      CHECK(curve[t].far == want.far);
      CHECK(curve[t].frr == want.frr);
      if (t > 0) {
        CHECK(curve[t].far >= curve[t - 1].far);
        CHECK(curve[t].frr <= curve[t - 1].frr);
      }
    }
  }
  CHECK_THROWS_AS(far_frr_curve(ScoreSet{{}, {1}}), InputError);
  CHECK_THROWS_AS(far_frr_curve(ScoreSet{{1}, {}}), InputError);
  CHECK_THROWS_AS(far_frr_curve(ScoreSet{{1}, {200}}), InputError);
}

TEST_CASE("eer examples") {
  CHECK(eer(ScoreSet{{1, 2}, {10, 11}}).eer == 0.0);
  CHECK(eer(ScoreSet{{4, 9, 9, 30}, {4, 9, 9, 30}}).eer == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(eer(ScoreSet{{0}, {0}}).eer == doctest::Approx(0.5).epsilon(1e-12));

  const ScoreSet s{{1, 3}, {2, 4}};
  const auto got = eer(s);
  const auto want = oracle::eer(s);
  CHECK(std::abs(got.eer - want.first) < 1e-12);
  CHECK(std::abs(got.threshold - want.second) < 1e-12);
  // t=1: FAR 0, FRR 0.5; t=2: FAR 0.5, FRR 0.5 -> exact tie at 2.
  CHECK(got.eer == 0.5);
  CHECK(got.threshold == 2.0);
}

TEST_CASE("eer matches the sweep oracle on random score sets") {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const ScoreSet s = random_scores(rng, 1000);
    const auto got = eer(s);
    const auto want = oracle::eer(s);
    CHECK(std::abs(got.eer - want.first) < 1e-9);
    CHECK(std::abs(got.threshold - want.second) < 1e-9);
    CHECK(got.eer >= 0.0);
    CHECK(got.eer <= 1.0);
  }
}

TEST_CASE("property: bracketing rates survive strictly increasing relabelling") {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    ScoreSet s;
    for (int k = 0; k < 40; ++k) s.genuine.push_back(static_cast<int>(rng.below(30)));
    for (int k = 0; k < 40; ++k) s.imposter.push_back(10 + static_cast<int>(rng.below(30)));
    // Map 0..39 onto a strictly increasing set within 0..128.
    std::vector<int> map(40);
    int v = static_cast<int>(rng.below(5));
    for (auto& m : map) {
      m = v;
      v += 1 + static_cast<int>(rng.below(2));
    }
    ScoreSet r;
    for (int d : s.genuine) r.genuine.push_back(map[d]);
    for (int d : s.imposter) r.imposter.push_back(map[d]);
    // With interpolation between adjacent integers only the points at the
    // occupied scores matter; compare rates at the images of every threshold.
    for (int t = 0; t < 40; ++t) {
      const auto a = oracle::rates_at(s, t);
      const auto b = oracle::rates_at(r, map[t]);
      CHECK(a.far == b.far);
      CHECK(a.frr == b.frr);
    }
    const auto ca = far_frr_curve(s);
    const auto cb = far_frr_curve(r);
    auto bracket = [](const std::vector<RatePoint>& c) {
      for (const auto& p : c)
        if (p.far >= p.frr) return std::pair{p.far, p.frr};
      return std::pair{-1.0, -1.0};
    };
    CHECK(bracket(ca) == bracket(cb));
  }
}

TEST_CASE("identification accuracy") {
  Rng rng(5);
  Gallery g;
  std::vector<Probe> same;
  for (int i = 0; i < 30; ++i) {
    const HashCode c = random_code(rng);
    g.enroll("c" + std::to_string(i % 10), c);
    same.push_back({"c" + std::to_string(i % 10), c});
  }
  CHECK(identification_accuracy(g, same) == 1.0);

  std::vector<Probe> random_probes;
  for (int i = 0; i < 40; ++i) random_probes.push_back({"c" + std::to_string(rng.below(10)), random_code(rng)});
  std::size_t hits = 0;
  for (const auto& p : random_probes) hits += oracle::identify(g, p.code).label == p.label ? 1 : 0;
  CHECK(identification_accuracy(g, random_probes) == static_cast<double>(hits) / 40.0);
}

TEST_CASE("random probes identify at chance") {
  Rng rng(6);
  const int C = 10;
  Gallery g;
  for (int i = 0; i < 5 * C; ++i) g.enroll("c" + std::to_string(i % C), random_code(rng));
  std::vector<Probe> probes;
  const int n = 4000;
  for (int i = 0; i < n; ++i) probes.push_back({"c" + std::to_string(rng.below(C)), random_code(rng)});
  const double acc = identification_accuracy(g, probes);
  const double p = 1.0 / C;
  const double sigma = std::sqrt(p * (1 - p) / n);
  CHECK(std::abs(acc - p) < 3 * sigma);
}

TEST_CASE("roc export") {
  test_util::TempDir dir;
  const ScoreSet s{{1, 2, 3}, {50, 60}};
  export_roc(s, dir.path / "a.csv");
  export_roc(s, dir.path / "b.csv");
  std::ifstream a(dir.path / "a.csv"), b(dir.path / "b.csv");
  const std::string ta{std::istreambuf_iterator<char>(a), {}};
  const std::string tb{std::istreambuf_iterator<char>(b), {}};
  CHECK(ta == tb);
  std::istringstream lines(ta);
  std::string line;
  std::getline(lines, line);
  CHECK(line == "threshold,far,frr");
  int rows = 0;
  bool perfect = false;
  while (std::getline(lines, line)) {
    ++rows;
    const auto c1 = line.find(',');
    const auto c2 = line.find(',', c1 + 1);
    const double far = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
    const double frr = std::stod(line.substr(c2 + 1));
    perfect = perfect || (far == 0.0 && frr == 0.0);
  }
  CHECK(rows == 129);
  CHECK(perfect);
  CHECK_THROWS_AS(export_roc(s, dir.path / "no" / "such" / "dir.csv"), IoError);
}

TEST_CASE("format_real keeps nine significant digits and round-trips") {
  CHECK(format_real(0.5) == "0.500000000");
  CHECK(format_real(1.0 / 3.0) == "0.3333333333333333");
  for (double v : {0.1, 1e-7, 123456.789, 2.0 / 7.0}) CHECK(std::strtod(format_real(v).c_str(), nullptr) == v);
}

TEST_CASE("summary format") {
  EvaluationSummary s{0.75, 0.125, 10.5, 3, 9};
  CHECK(format_summary(s) ==
        "accuracy=0.750000000\neer=0.125000000\nthreshold_star=10.5000000\ngenuine_count=3\nimposter_count=9\n");
}
