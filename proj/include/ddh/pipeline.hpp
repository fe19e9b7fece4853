#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ddh/dataset.hpp"
#include "ddh/evaluation.hpp"
#include "ddh/hash_match.hpp"
#include "ddh/losses.hpp"
#include "ddh/network.hpp"
#include "ddh/optimizer.hpp"

namespace ddh {

// Desk-scale presets used by the pipeline: the first convolution strides by 2.
NetworkSpec desk_teacher_spec(std::size_t input_size = 64);
NetworkSpec desk_student_spec(std::size_t input_size = 64);

constexpr std::size_t kDefaultIterations = 2000;
constexpr std::size_t kLongIterations = 10000;

struct TrainConfig {
  NetworkSpec teacher_spec = desk_teacher_spec();
  NetworkSpec student_spec = desk_student_spec();
  LossConfig loss;
  OptimizerMethod teacher_optimizer = OptimizerMethod::adam;
  OptimizerMethod student_optimizer = OptimizerMethod::adam;
  double learning_rate = 1e-3;
  std::size_t iterations = kDefaultIterations;
  std::size_t batch_classes = 8;    // k
  std::size_t batch_per_class = 4;  // m
  std::uint64_t seed = 0;
  StudentTerms terms;               // which distillation terms the student uses
  Precision precision = Precision::f32;
  std::size_t log_every = 50;

  void validate() const;
};

struct LossSample {
  std::size_t iteration;
  LossBreakdown terms;
};

struct Timings {
  double train_seconds = 0.0;
  double extraction_ms_per_image = 0.0;
  double matching_us_per_pair = 0.0;
};

struct RunReport {
  std::string role;                   // "teacher" or "student"
  std::uint64_t seed = 0;
  std::vector<double> loss_history;   // total loss at every iteration
  std::vector<LossSample> samples;    // breakdown every log_every iterations
  std::optional<EvaluationSummary> metrics;
  std::string roc_path;
  Timings timings;
  std::string config_echo;
};

// key=value lines. Wall-clock timings vary run to run; leave them out where
// the text must be reproducible.
std::string format_report(const RunReport& report, bool include_timings = true);
std::string describe_config(const TrainConfig& cfg);

struct TrainedNetwork {
  Network net;
  OptimizerState optimizer;
  RunReport report;
};

using LogCallback = std::function<void(const std::string& role, const LossSample&)>;

// Pairwise hashing plus quantization loss only.
TrainedNetwork train_teacher(const TrainConfig& cfg, const Dataset& train, const LogCallback& log = {});
// DHN plus relative and hard distillation terms (and any enabled extras) against a frozen teacher.
TrainedNetwork train_student(const TrainConfig& cfg, const Dataset& train, const Network& teacher,
                             const LogCallback& log = {});

// N x code_width features for every item, in dataset order.
Tensor encode_features(const Network& net, const Dataset& ds, Precision precision = Precision::f64);
Gallery encode_and_enroll(const Network& net, const Dataset& ds);
std::vector<Probe> encode_probes(const Network& net, const Dataset& ds);

struct EvaluationRun {
  EvaluationSummary summary;
  ScoreSet scores;
  Timings timings;
};

// Identification and verification of `test` against `gallery`; writes the ROC
// CSV when a path is given.
EvaluationRun evaluate(const Network& net, const Gallery& gallery, const Dataset& test,
                       const std::optional<std::filesystem::path>& roc_path = std::nullopt);

// Loss configurations compared by the ablation.
enum class AblationConfig { dhn, dhn_dir, dhn_rela, dhn_rela_hard };
std::string to_string(AblationConfig c);
AblationConfig ablation_config_from_string(const std::string& s);
const std::vector<AblationConfig>& all_ablation_configs();
StudentTerms terms_for(AblationConfig c);

struct MetricRow {
  std::string config;
  std::vector<double> accuracy;  // per seed
  std::vector<double> eer;       // per seed
  double mean_accuracy() const;
  double mean_eer() const;
};

struct AblationResult {
  std::vector<std::uint64_t> seeds;
  MetricRow teacher;
  std::vector<MetricRow> rows;
  const MetricRow& row(AblationConfig c) const;
};

// For every seed: split once, train the teacher once, then one student per
// configuration, all on the same split and batch sequence.
AblationResult ablation_suite(const TrainConfig& cfg, const Dataset& ds, const SplitSpec& split_spec,
                              std::span<const std::uint64_t> seeds,
                              const std::vector<AblationConfig>& configs = all_ablation_configs(),
                              const LogCallback& log = {});
// Accumulates one more seed into `into` (same layout as ablation_suite).
void ablation_seed(const TrainConfig& cfg, const Split& split, std::uint64_t seed,
                   const std::vector<AblationConfig>& configs, AblationResult& into, const LogCallback& log = {});

// CSV "config,accuracy,eer" with per-configuration means.
void write_ablation_csv(const AblationResult& result, const std::filesystem::path& path);

// Student / DDH / Teacher on one or more sub-datasets, as in a per-database
// results table. Accuracy and EER are in percent.
struct ProtocolRow {
  std::string database;
  double student_accuracy, ddh_accuracy, teacher_accuracy;
  double student_eer, ddh_eer, teacher_eer;
  std::size_t genuine_count, imposter_count;
};

struct ProtocolReport {
  std::vector<ProtocolRow> rows;
  ProtocolRow average() const;
};

ProtocolRow run_protocol(const TrainConfig& cfg, const std::string& name, const Dataset& ds,
                         const SplitSpec& split_spec, const LogCallback& log = {});
// Two tables: identification accuracy and verification EER, each with an
// Average row.
std::string format_protocol(const ProtocolReport& report);
void write_protocol_csv(const ProtocolReport& report, const std::filesystem::path& path);

}  // namespace ddh
