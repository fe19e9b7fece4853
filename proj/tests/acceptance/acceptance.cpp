// Acceptance suite: one PASS/FAIL line per criterion.
//
//   ddh_acceptance [--only N]... [--polyu DIR]... [--work DIR]
//
// Criterion 9 runs on every --polyu database root (root/<class>/<image>);
// without one it builds a small corpus in the same layout and runs on that.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ddh/dataset.hpp"
#include "ddh/error.hpp"
#include "ddh/evaluation.hpp"
#include "ddh/grad_check.hpp"
#include "ddh/hash_match.hpp"
#include "ddh/pipeline.hpp"
#include "ddh/rng.hpp"
#include "ddh/roi.hpp"
#include "oracles.hpp"
#include "roi_fixtures.hpp"

namespace fs = std::filesystem;
using namespace ddh;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double cpu_seconds_since(std::clock_t c0) {
  return static_cast<double>(std::clock() - c0) / static_cast<double>(CLOCKS_PER_SEC);
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

struct Outcome {
  bool pass;
  std::string detail;
};

HashCode random_code(Rng& rng) {
  HashCode c;
  for (auto& b : c.bytes) b = static_cast<std::uint8_t>(rng.next());
  return c;
}

HashCode flip_bits(HashCode c, Rng& rng, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t k = rng.below(kCodeBits);
    c.set_bit(k, !c.bit(k));
  }
  return c;
}

// ------------------------------------------------------------------ 1

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  const auto suite = run_grad_check_suite(20240, 3);
  const double secs = seconds_since(t0);
  double worst = 0.0;
  std::size_t instances = 0;
  for (const auto& r : suite) {
    worst = std::max(worst, r.max_rel_error);
    instances += r.instances;
  }
  return {worst < 1e-4 && instances >= 20 && secs < 60.0,
          std::to_string(suite.size()) + " losses, " + std::to_string(instances) + " instances, max rel error " +
              sci(worst) + " (< 1e-4), " + fmt(secs, 1) + " s (< 60)"};
}

// ------------------------------------------------------------------ 2

Outcome eer_oracle() {
  const auto t0 = Clock::now();
  Rng rng(77);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    ScoreSet s;
    const std::size_t total = 2 + rng.below(999);
    const std::size_t ng = 1 + rng.below(total - 1);
    const int g_hi = static_cast<int>(rng.below(129));
    const int i_lo = static_cast<int>(rng.below(129));
    for (std::size_t k = 0; k < ng; ++k) s.genuine.push_back(static_cast<int>(rng.below(g_hi + 1)));
    for (std::size_t k = ng; k < total; ++k) {
      s.imposter.push_back(i_lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(129 - i_lo))));
    }
    const auto got = eer(s);
    const auto want = oracle::eer(s);
    worst = std::max({worst, std::abs(got.eer - want.first), std::abs(got.threshold - want.second)});
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-9 && secs < 10.0,
          "200 score sets, max deviation " + sci(worst) + " (<= 1e-9), " + fmt(secs, 2) + " s (< 10)"};
}

// ------------------------------------------------------------------ 3

Outcome matcher_oracle() {
  const auto t0 = Clock::now();
  Rng rng(91);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Gallery g;
    const std::size_t n = 1 + rng.below(1000);
    std::vector<HashCode> pool;
    for (std::size_t i = 0; i < n; ++i) {
      // Duplicates and near copies make ties and small distances common.
      HashCode c = pool.empty() || rng.below(4) != 0 ? random_code(rng)
                                                     : flip_bits(pool[rng.below(pool.size())], rng, rng.below(3));
      pool.push_back(c);
      g.enroll("c" + std::to_string(rng.below(50)), c);
    }
    for (int p = 0; p < 20; ++p) {
      const HashCode probe = rng.below(2) ? random_code(rng) : flip_bits(pool[rng.below(pool.size())], rng, rng.below(8));
      const Match got = identify(g, probe);
      const auto want = oracle::identify(g, probe);
      if (got.entry_id != want.entry_id || got.distance != want.distance || got.label != want.label) ++mismatches;
    }
  }
  std::size_t violations = 0;
  for (int i = 0; i < 10000; ++i) {
    const HashCode a = random_code(rng);
    const HashCode b = rng.below(10) == 0 ? a : flip_bits(a, rng, rng.below(128));
    const HashCode c = rng.below(2) ? random_code(rng) : flip_bits(b, rng, rng.below(64));
    const bool ok = hamming(a, b) == oracle::hamming_bits(a, b) && hamming(a, b) == hamming(b, a) &&
                    (hamming(a, b) == 0) == (a == b) && hamming(a, c) <= hamming(a, b) + hamming(b, c) &&
                    hamming(a, a) == 0;
    violations += ok ? 0 : 1;
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && violations == 0 && secs < 10.0,
          "100 galleries x 20 probes, " + std::to_string(mismatches) + " mismatches; 10000 triples, " +
              std::to_string(violations) + " metric violations; " + fmt(secs, 2) + " s (< 10)"};
}

// ------------------------------------------------------------------ 4, 5

struct DistillationRuns {
  AblationResult result;
  double cpu_seconds = 0.0;
};

DistillationRuns distillation_runs() {
  const std::clock_t c0 = std::clock();
  const TrainConfig cfg;
  const Dataset ds = gen_synthetic(50, 10, 64, 0);
  const std::uint64_t seeds[] = {0, 1, 2, 3, 4};
  DistillationRuns runs;
  runs.result = ablation_suite(cfg, ds, {}, seeds,
                               {AblationConfig::dhn, AblationConfig::dhn_rela, AblationConfig::dhn_rela_hard});
  runs.cpu_seconds = cpu_seconds_since(c0);
  return runs;
}

std::string per_seed(const MetricRow& r) {
  std::string s;
  for (double a : r.accuracy) s += (s.empty() ? "" : " ") + fmt(a, 3);
  return s;
}

Outcome distillation_efficacy(const DistillationRuns& runs) {
  const auto& r = runs.result;
  const double teacher = r.teacher.mean_accuracy();
  const double ddh = r.row(AblationConfig::dhn_rela_hard).mean_accuracy();
  const double student = r.row(AblationConfig::dhn).mean_accuracy();
  const bool order = teacher >= ddh && ddh >= student && ddh - student > 0.0;
  const bool fast = runs.cpu_seconds < 1800.0;
  return {order && fast, "mean accuracy teacher " + fmt(teacher) + " >= DDH " + fmt(ddh) + " >= student-only " +
                             fmt(student) + " (per seed teacher [" + per_seed(r.teacher) + "], DDH [" +
                             per_seed(r.row(AblationConfig::dhn_rela_hard)) + "], student [" +
                             per_seed(r.row(AblationConfig::dhn)) + "]); CPU " + fmt(runs.cpu_seconds / 60.0, 1) +
                             " min (< 30)"};
}

Outcome ablation_direction(const DistillationRuns& runs) {
  const auto& r = runs.result;
  const double dhn = r.row(AblationConfig::dhn).mean_accuracy();
  const double rela = r.row(AblationConfig::dhn_rela).mean_accuracy();
  const double hard = r.row(AblationConfig::dhn_rela_hard).mean_accuracy();
  return {dhn <= rela && rela <= hard, "mean accuracy L_DHN " + fmt(dhn) + " <= L_DHN+L_rela " + fmt(rela) +
                                           " <= L_DHN+L_rela+L_hard " + fmt(hard) + " (L_DHN+L_rela per seed [" +
                                           per_seed(r.row(AblationConfig::dhn_rela)) + "])"};
}

// ------------------------------------------------------------------ 6

Outcome reduction_identity() {
  TrainConfig cfg;
  cfg.iterations = 300;
  cfg.seed = 11;
  const Split parts = split(gen_synthetic(50, 10, 64, 0), {});
  const TrainedNetwork teacher = train_teacher(cfg, parts.train);
  TrainConfig zero = cfg;
  zero.loss.alpha = 0.0;
  zero.loss.beta = 0.0;
  const TrainedNetwork student = train_student(zero, parts.train, teacher.net);
  TrainConfig plain = cfg;
  plain.teacher_spec = cfg.student_spec;
  const TrainedNetwork dhn = train_teacher(plain, parts.train);
  const bool same = student.net == dhn.net && student.report.loss_history == dhn.report.loss_history;
  return {same, std::string("300 iterations, seed 11: parameters ") + (student.net == dhn.net ? "bit-identical" : "differ") +
                    ", checksums " + std::to_string(student.net.checksum()) + " / " +
                    std::to_string(dhn.net.checksum())};
}

// ------------------------------------------------------------------ 7

Outcome roi_geometry() {
  const roi_fixtures::Similarity transforms[] = {
      {0.0, 1.0, {0, 0}}, {0.4, 1.3, {40, 30}}, {-1.1, 0.8, {150, 120}}, {2.5, 1.7, {400, 200}},
      {std::numbers::pi / 2, 1.0, {300, 20}}};
  double worst = 0.0;
  for (const auto& tf : transforms) worst = std::max(worst, roi_fixtures::equivariance_error(tf));
  const auto pts = roi_fixtures::worked_keypoints();
  const RoiFrame f = roi_frame(pts);
  const double length = std::hypot(pts[12].x - pts[0].x, pts[12].y - pts[0].y);
  const double offset = std::hypot(f.center.x - pts[6].x, f.center.y - pts[6].y);
  const bool worked = length == 100.0 && f.side == 60.0 && offset == 40.0 && f.side / length == 0.6 &&
                      offset / length == 0.4;
  return {worst < 0.02 && worked, "equivariance mean abs difference " + sci(worst) + " (< 0.02) over 5 transforms; "
                                      "L = " + fmt(length, 1) + " gives s = " + fmt(f.side, 1) + ", offset " +
                                      fmt(offset, 1)};
}

// ------------------------------------------------------------------ 8

Outcome throughput() {
  Rng rng(8);
  Gallery g;
  for (std::size_t i = 0; i < 1'000'000; ++i) g.enroll("x", random_code(rng));
  const HashCode probe = random_code(rng);
  const auto t0 = Clock::now();
  const Match m = identify(g, probe);
  const double secs = seconds_since(t0);
  return {secs < 1.0 && m.distance >= 0,
          "identify over 1,000,000 codes in " + fmt(secs * 1e3, 1) + " ms (< 1000), single thread"};
}

// ------------------------------------------------------------------ 9

// A small corpus in the expected layout: two databases, 12 classes of 12
// images, 6 of them for training.
std::vector<fs::path> mini_corpus(const fs::path& work) {
  std::vector<fs::path> roots;
  for (const auto& [name, seed] : {std::pair{"Mini-A", 5}, std::pair{"Mini-B", 6}}) {
    const fs::path root = work / name;
    fs::remove_all(root);
    export_dataset(gen_synthetic(12, 12, 64, static_cast<std::uint64_t>(seed)), root);
    roots.push_back(root);
  }
  return roots;
}

Outcome protocol_report(const std::vector<std::string>& polyu, const fs::path& work, std::string& table) {
  TrainConfig cfg;
  std::vector<fs::path> roots(polyu.begin(), polyu.end());
  const bool supplied = !roots.empty();
  if (!supplied) cfg.iterations = 300;
  if (!supplied) roots = mini_corpus(work);
  const SplitSpec spec{0.5, 0, 6};
  ProtocolReport report;
  bool counts_ok = true;
  for (const auto& root : roots) {
    const Dataset ds = load_dataset(root, 64, 64);
    const std::size_t classes = ds.num_classes();
    const ProtocolRow row = run_protocol(cfg, fs::absolute(root).lexically_normal().filename().string(), ds, spec);
    // 6 gallery images per class; every test image is compared with all of them.
    const std::size_t tests = ds.size() - 6 * classes;
    counts_ok = counts_ok && row.genuine_count == tests * 6 && row.imposter_count == tests * 6 * (classes - 1);
    report.rows.push_back(row);
  }
  table = format_protocol(report);
  const fs::path out = work / "protocol.txt";
  std::ofstream(out) << table;
  write_protocol_csv(report, work / "protocol.csv");
  const bool shaped = table.find("ACCURACY (%) OF PALMPRINT IDENTIFICATION") != std::string::npos &&
                      table.find("EER (%) OF PALMPRINT VERIFICATION") != std::string::npos &&
                      table.find("Average") != std::string::npos;
  bool in_range = true;
  for (const auto& r : report.rows) {
    for (double v : {r.student_accuracy, r.ddh_accuracy, r.teacher_accuracy, r.student_eer, r.ddh_eer, r.teacher_eer}) {
      in_range = in_range && v >= 0.0 && v <= 100.0;
    }
  }
  return {shaped && in_range && counts_ok,
          std::to_string(report.rows.size()) + (supplied ? " supplied" : " generated mini") +
              " database(s), 6 training images per class, report written to " + out.string() +
              " (numbers not compared with published values)"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  std::vector<int> only;
  std::vector<std::string> polyu;
  std::string work = (fs::temp_directory_path() / "ddh_acceptance").string();
  app.add_option("--only", only, "run only these criteria (1-9)")->check(CLI::Range(1, 9));
  app.add_option("--polyu", polyu, "database root(s) for criterion 9")->check(CLI::ExistingDirectory);
  app.add_option("--work", work, "scratch directory")->capture_default_str();
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  const std::set<int> selected(only.begin(), only.end());
  auto wanted = [&](int n) { return selected.empty() || selected.count(n) > 0; };
  int failures = 0;
  auto report = [&](int n, const std::string& title, const std::function<Outcome()>& run) {
    if (!wanted(n)) return;
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::cout << "criterion " << n << " " << (o.pass ? "PASS" : "FAIL") << " " << title << ": " << o.detail
              << std::endl;
  };

  report(1, "gradient suite", gradient_suite);
  report(2, "EER oracle equivalence", eer_oracle);
  report(3, "matcher oracle equivalence", matcher_oracle);
  if (wanted(4) || wanted(5)) {
    std::optional<DistillationRuns> runs;
    std::string error;
    try {
      runs = distillation_runs();
    } catch (const std::exception& e) {
      error = e.what();
    }
    auto from_runs = [&](Outcome (*f)(const DistillationRuns&)) {
      return [&, f] { return runs ? f(*runs) : Outcome{false, "error: " + error}; };
    };
    report(4, "distillation efficacy", from_runs(distillation_efficacy));
    report(5, "ablation direction", from_runs(ablation_direction));
  }
  report(6, "reduction identity", reduction_identity);
  report(7, "ROI geometry", roi_geometry);
  report(8, "throughput floor", throughput);
  std::string table;
  report(9, "protocol report", [&] { return protocol_report(polyu, work, table); });
  if (!table.empty()) std::cout << '\n' << table;

  std::cout << (failures == 0 ? "all selected criteria passed" : std::to_string(failures) + " criteria failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
