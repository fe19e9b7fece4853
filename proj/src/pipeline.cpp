#include "ddh/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "ddh/error.hpp"
#include "ddh/rng.hpp"

namespace ddh {

namespace {

constexpr std::uint64_t kTagInit = 0x6e657477;
constexpr std::uint64_t kTagBatches = 0x62746368;
constexpr std::size_t kEncodeBatch = 64;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

void gather_rows(const Tensor& src, std::span<const std::size_t> rows, Tensor& dst) {
  const std::size_t width = src.dim(1);
  dst.resize({rows.size(), width});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = src.row(rows[i]);
    std::copy(r.begin(), r.end(), dst.row(i).begin());
  }
}

// Shared by teacher and student training so that a student without active
// distillation terms follows exactly the plain DHN trajectory.
TrainedNetwork train_network(const TrainConfig& cfg, const NetworkSpec& spec, OptimizerMethod method,
                             const Dataset& train, const Tensor* teacher_features, const StudentTerms& terms,
                             const std::string& role, const LogCallback& log) {
  cfg.validate();
  spec.validate();
  if (train.empty()) throw DataError("training set is empty");
  if (train.height() != spec.input_height || train.width() != spec.input_width || spec.input_channels != 1) {
    throw InputError("training images are " + std::to_string(train.height()) + "x" + std::to_string(train.width()) +
                     ", network expects " + shape_string(spec.input_shape(1)));
  }
  const auto t0 = Clock::now();
  TrainedNetwork out{build_network(spec, derive_seed(cfg.seed, {kTagInit})),
                     make_optimizer(method, cfg.learning_rate), RunReport{}};
  out.report.role = role;
  out.report.seed = cfg.seed;
  out.report.config_echo = describe_config(cfg);
  out.report.loss_history.reserve(cfg.iterations);

  const StudentTerms active = teacher_features ? terms : StudentTerms{false, false, false, false};
  const std::uint64_t batch_seed = derive_seed(cfg.seed, {kTagBatches});
  ForwardPass pass;
  pass.set_precision(cfg.precision);
  GradientResult result;
  Tensor teacher_batch;
  LossBreakdown breakdown;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const PairBatch batch = sample_pair_batch(train, cfg.batch_classes, cfg.batch_per_class, batch_seed, it);
    if (teacher_features) gather_rows(*teacher_features, batch.indices, teacher_batch);
    const FeatureObjective objective = [&](const Tensor& f) {
      StudentLoss l = total_student_loss(f, teacher_features ? teacher_batch : f, batch.labels, cfg.loss, active);
      breakdown = l.terms;
      return std::move(l.eval);
    };
    try {
      gradients(out.net, batch.images, objective, pass, result);
    } catch (const NumericError& e) {
      throw NumericError(role + " training, iteration " + std::to_string(it) + ": " + e.what());
    }
    out.report.loss_history.push_back(result.loss);
    if (it % cfg.log_every == 0 || it + 1 == cfg.iterations) {
      out.report.samples.push_back({it, breakdown});
      if (log) log(role, out.report.samples.back());
    }
    optimizer_step(out.net, result.grads, out.optimizer);
  }
  out.report.timings.train_seconds = seconds_since(t0);
  return out;
}

}  // namespace

NetworkSpec desk_teacher_spec(std::size_t input_size) { return NetworkSpec::teacher(input_size, kCodeBits, 2); }
NetworkSpec desk_student_spec(std::size_t input_size) { return NetworkSpec::student(input_size, kCodeBits, 2); }

void TrainConfig::validate() const {
  if (iterations == 0) throw ConfigError("iterations must be positive");
  if (batch_classes < 2) throw ConfigError("a batch needs at least 2 classes");
  if (batch_per_class < 2) throw ConfigError("a batch needs at least 2 items per class");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be positive");
  if (log_every == 0) throw ConfigError("log interval must be positive");
  loss.validate();
}

std::string describe_config(const TrainConfig& cfg) {
  std::ostringstream os;
  os << "teacher=" << cfg.teacher_spec.describe() << '\n'
     << "student=" << cfg.student_spec.describe() << '\n'
     << "margin=" << format_real(cfg.loss.margin) << '\n'
     << "quant_weight=" << format_real(cfg.loss.quant_weight) << '\n'
     << "alpha=" << format_real(cfg.loss.alpha) << '\n'
     << "beta=" << format_real(cfg.loss.beta) << '\n'
     << "temperature=" << format_real(cfg.loss.temperature) << '\n'
     << "direct_weight=" << format_real(cfg.loss.direct_weight) << '\n'
     << "hinton_weight=" << format_real(cfg.loss.hinton_weight) << '\n'
     << "hashing_distance=" << to_string(cfg.loss.hashing_distance) << '\n'
     << "rela_squared=" << cfg.loss.rela_squared << '\n'
     << "rela_average=" << cfg.loss.rela_average << '\n'
     << "teacher_optimizer=" << to_string(cfg.teacher_optimizer) << '\n'
     << "student_optimizer=" << to_string(cfg.student_optimizer) << '\n'
     << "learning_rate=" << format_real(cfg.learning_rate) << '\n'
     << "iterations=" << cfg.iterations << '\n'
     << "batch_classes=" << cfg.batch_classes << '\n'
     << "batch_per_class=" << cfg.batch_per_class << '\n'
     << "seed=" << cfg.seed << '\n'
     << "use_direct=" << cfg.terms.direct << '\n'
     << "use_relative=" << cfg.terms.relative << '\n'
     << "use_hard=" << cfg.terms.hard << '\n'
     << "use_soft_label=" << cfg.terms.soft_label << '\n'
     << "precision=" << to_string(cfg.precision) << '\n';
  return os.str();
}

std::string format_report(const RunReport& r, bool include_timings) {
  std::ostringstream os;
  os << "role=" << r.role << '\n' << "seed=" << r.seed << '\n';
  if (r.metrics) {
    os << format_summary(*r.metrics);
    if (!r.roc_path.empty()) os << "roc=" << r.roc_path << '\n';
  }
  if (include_timings) {
    os << "train_seconds=" << format_real(r.timings.train_seconds) << '\n'
       << "extraction_ms_per_image=" << format_real(r.timings.extraction_ms_per_image) << '\n'
       << "matching_us_per_pair=" << format_real(r.timings.matching_us_per_pair) << '\n';
  }
  if (!r.loss_history.empty()) {
    os << "loss_first=" << format_real(r.loss_history.front()) << '\n'
       << "loss_last=" << format_real(r.loss_history.back()) << '\n';
  }
  for (const auto& s : r.samples) {
    os << "loss@" << s.iteration << "=total:" << format_real(s.terms.total) << ";hashing:" << format_real(s.terms.hashing)
       << ";quantization:" << format_real(s.terms.quantization) << ";direct:" << format_real(s.terms.direct)
       << ";relative:" << format_real(s.terms.relative) << ";hard:" << format_real(s.terms.hard)
       << ";soft_label:" << format_real(s.terms.soft_label) << '\n';
  }
  os << r.config_echo;
  return os.str();
}

TrainedNetwork train_teacher(const TrainConfig& cfg, const Dataset& train, const LogCallback& log) {
  return train_network(cfg, cfg.teacher_spec, cfg.teacher_optimizer, train, nullptr, {}, "teacher", log);
}

TrainedNetwork train_student(const TrainConfig& cfg, const Dataset& train, const Network& teacher,
                             const LogCallback& log) {
  if (teacher.spec().code_width != cfg.student_spec.code_width) {
    throw SpecError("teacher code width " + std::to_string(teacher.spec().code_width) + " differs from student " +
                    std::to_string(cfg.student_spec.code_width));
  }
  // The teacher is frozen: its features are constants, computed once.
  const Tensor teacher_features = encode_features(teacher, train);
  return train_network(cfg, cfg.student_spec, cfg.student_optimizer, train, &teacher_features, cfg.terms, "student",
                       log);
}

Tensor encode_features(const Network& net, const Dataset& ds, Precision precision) {
  if (ds.empty()) throw InputError("cannot encode an empty dataset");
  const auto& spec = net.spec();
  if (ds.height() != spec.input_height || ds.width() != spec.input_width || spec.input_channels != 1) {
    throw InputError("dataset images are " + std::to_string(ds.height()) + "x" + std::to_string(ds.width()) +
                     ", network expects " + shape_string(spec.input_shape(1)));
  }
  Tensor features({ds.size(), spec.code_width});
  for (std::size_t first = 0; first < ds.size(); first += kEncodeBatch) {
    const std::size_t count = std::min(kEncodeBatch, ds.size() - first);
    const Tensor out = forward(net, ds.batch(first, count), precision);
    std::copy(out.values().begin(), out.values().end(), features.data() + first * spec.code_width);
  }
  return features;
}

Gallery encode_and_enroll(const Network& net, const Dataset& ds) {
  const auto codes = binarize_rows(encode_features(net, ds));
  Gallery g;
  for (std::size_t i = 0; i < ds.size(); ++i) g.enroll(ds.label(i), codes[i]);
  return g;
}

std::vector<Probe> encode_probes(const Network& net, const Dataset& ds) {
  const auto codes = binarize_rows(encode_features(net, ds));
  std::vector<Probe> probes;
  probes.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) probes.push_back({ds.label(i), codes[i]});
  return probes;
}

EvaluationRun evaluate(const Network& net, const Gallery& gallery, const Dataset& test,
                       const std::optional<std::filesystem::path>& roc_path) {
  EvaluationRun run;
  auto t0 = Clock::now();
  const auto probes = encode_probes(net, test);
  run.timings.extraction_ms_per_image = 1e3 * seconds_since(t0) / static_cast<double>(test.size());
  t0 = Clock::now();
  run.scores = collect_scores(gallery, probes);
  const double pairs = static_cast<double>(gallery.size() * probes.size());
  run.timings.matching_us_per_pair = 1e6 * seconds_since(t0) / pairs;
  const EerResult e = eer(run.scores);
  run.summary = {identification_accuracy(gallery, probes), e.eer, e.threshold, run.scores.genuine.size(),
                 run.scores.imposter.size()};
  if (roc_path) export_roc(run.scores, *roc_path);
  return run;
}

std::string to_string(AblationConfig c) {
  switch (c) {
    case AblationConfig::dhn: return "L_DHN";
    case AblationConfig::dhn_dir: return "L_DHN+L_dir";
    case AblationConfig::dhn_rela: return "L_DHN+L_rela";
    case AblationConfig::dhn_rela_hard: return "L_DHN+L_rela+L_hard";
  }
  return "unknown";
}

AblationConfig ablation_config_from_string(const std::string& s) {
  for (auto c : all_ablation_configs()) {
    if (to_string(c) == s) return c;
  }
  throw ConfigError("unknown ablation configuration '" + s + "'");
}

const std::vector<AblationConfig>& all_ablation_configs() {
  static const std::vector<AblationConfig> all = {AblationConfig::dhn, AblationConfig::dhn_dir,
                                                  AblationConfig::dhn_rela, AblationConfig::dhn_rela_hard};
  return all;
}

StudentTerms terms_for(AblationConfig c) {
  switch (c) {
    case AblationConfig::dhn: return {false, false, false, false};
    case AblationConfig::dhn_dir: return {true, false, false, false};
    case AblationConfig::dhn_rela: return {false, true, false, false};
    case AblationConfig::dhn_rela_hard: return {false, true, true, false};
  }
  return {};
}

double MetricRow::mean_accuracy() const { return mean(accuracy); }
double MetricRow::mean_eer() const { return mean(eer); }

const MetricRow& AblationResult::row(AblationConfig c) const {
  for (const auto& r : rows) {
    if (r.config == to_string(c)) return r;
  }
  throw StateError("ablation result has no row " + to_string(c));
}

void ablation_seed(const TrainConfig& cfg, const Split& split, std::uint64_t seed,
                   const std::vector<AblationConfig>& configs, AblationResult& into, const LogCallback& log) {
  if (into.rows.empty()) {
    into.teacher.config = "teacher";
    for (auto c : configs) into.rows.push_back({to_string(c), {}, {}});
  }
  TrainConfig run = cfg;
  run.seed = seed;
  const TrainedNetwork teacher = train_teacher(run, split.train, log);
  const auto t = evaluate(teacher.net, encode_and_enroll(teacher.net, split.train), split.test);
  into.teacher.accuracy.push_back(t.summary.accuracy);
  into.teacher.eer.push_back(t.summary.eer);
  for (std::size_t i = 0; i < configs.size(); ++i) {
    TrainConfig student_cfg = run;
    student_cfg.terms = terms_for(configs[i]);
    const TrainedNetwork student = train_student(student_cfg, split.train, teacher.net, log);
    const auto s = evaluate(student.net, encode_and_enroll(student.net, split.train), split.test);
    into.rows[i].accuracy.push_back(s.summary.accuracy);
    into.rows[i].eer.push_back(s.summary.eer);
  }
  into.seeds.push_back(seed);
}

AblationResult ablation_suite(const TrainConfig& cfg, const Dataset& ds, const SplitSpec& split_spec,
                              std::span<const std::uint64_t> seeds, const std::vector<AblationConfig>& configs,
                              const LogCallback& log) {
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  if (configs.empty()) throw ConfigError("ablation needs at least one configuration");
  const Split split_sets = split(ds, split_spec);
  AblationResult result;
  for (auto seed : seeds) ablation_seed(cfg, split_sets, seed, configs, result, log);
  return result;
}

void write_ablation_csv(const AblationResult& result, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "config,accuracy,eer\n";
  for (const auto& r : result.rows) {
    os << r.config << ',' << format_real(r.mean_accuracy()) << ',' << format_real(r.mean_eer()) << '\n';
  }
  if (!os.flush()) throw IoError("failed writing " + path.string());
}

ProtocolRow ProtocolReport::average() const {
  ProtocolRow avg{"Average", 0, 0, 0, 0, 0, 0, 0, 0};
  if (rows.empty()) return avg;
  for (const auto& r : rows) {
    avg.student_accuracy += r.student_accuracy;
    avg.ddh_accuracy += r.ddh_accuracy;
    avg.teacher_accuracy += r.teacher_accuracy;
    avg.student_eer += r.student_eer;
    avg.ddh_eer += r.ddh_eer;
    avg.teacher_eer += r.teacher_eer;
    avg.genuine_count += r.genuine_count;
    avg.imposter_count += r.imposter_count;
  }
  const auto n = static_cast<double>(rows.size());
  avg.student_accuracy /= n;
  avg.ddh_accuracy /= n;
  avg.teacher_accuracy /= n;
  avg.student_eer /= n;
  avg.ddh_eer /= n;
  avg.teacher_eer /= n;
  avg.genuine_count /= rows.size();
  avg.imposter_count /= rows.size();
  return avg;
}

ProtocolRow run_protocol(const TrainConfig& cfg, const std::string& name, const Dataset& ds,
                         const SplitSpec& split_spec, const LogCallback& log) {
  const Split sets = split(ds, split_spec);
  const TrainedNetwork teacher = train_teacher(cfg, sets.train, log);
  const auto t = evaluate(teacher.net, encode_and_enroll(teacher.net, sets.train), sets.test);

  TrainConfig student_cfg = cfg;
  student_cfg.terms = terms_for(AblationConfig::dhn);
  const TrainedNetwork student = train_student(student_cfg, sets.train, teacher.net, log);
  const auto s = evaluate(student.net, encode_and_enroll(student.net, sets.train), sets.test);

  TrainConfig ddh_cfg = cfg;
  ddh_cfg.terms = terms_for(AblationConfig::dhn_rela_hard);
  const TrainedNetwork ddh = train_student(ddh_cfg, sets.train, teacher.net, log);
  const auto d = evaluate(ddh.net, encode_and_enroll(ddh.net, sets.train), sets.test);

  return {name,
          100.0 * s.summary.accuracy,
          100.0 * d.summary.accuracy,
          100.0 * t.summary.accuracy,
          100.0 * s.summary.eer,
          100.0 * d.summary.eer,
          100.0 * t.summary.eer,
          t.summary.genuine_count,
          t.summary.imposter_count};
}

std::string format_protocol(const ProtocolReport& report) {
  auto fixed = [](double v, int digits) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(digits);
    os << v;
    return os.str();
  };
  std::vector<ProtocolRow> rows = report.rows;
  rows.push_back(report.average());
  std::ostringstream os;
  os << "ACCURACY (%) OF PALMPRINT IDENTIFICATION\n"
     << "Databases\tStudent\tDDH\tTeacher\n";
  for (const auto& r : rows) {
    os << r.database << '\t' << fixed(r.student_accuracy, 2) << '\t' << fixed(r.ddh_accuracy, 2) << '\t'
       << fixed(r.teacher_accuracy, 2) << '\n';
  }
  os << "\nEER (%) OF PALMPRINT VERIFICATION\n"
     << "Databases\tStudent\tDDH\tTeacher\n";
  for (const auto& r : rows) {
    os << r.database << '\t' << fixed(r.student_eer, 4) << '\t' << fixed(r.ddh_eer, 4) << '\t'
       << fixed(r.teacher_eer, 4) << '\n';
  }
  os << "\nMATCHINGS PER DATABASE\n"
     << "Databases\tGenuine\tImposter\n";
  for (const auto& r : report.rows) os << r.database << '\t' << r.genuine_count << '\t' << r.imposter_count << '\n';
  return os.str();
}

void write_protocol_csv(const ProtocolReport& report, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "database,student_accuracy,ddh_accuracy,teacher_accuracy,student_eer,ddh_eer,teacher_eer,genuine,imposter\n";
  std::vector<ProtocolRow> rows = report.rows;
  rows.push_back(report.average());
  for (const auto& r : rows) {
    os << r.database << ',' << format_real(r.student_accuracy) << ',' << format_real(r.ddh_accuracy) << ','
       << format_real(r.teacher_accuracy) << ',' << format_real(r.student_eer) << ',' << format_real(r.ddh_eer)
       << ',' << format_real(r.teacher_eer) << ',' << r.genuine_count << ',' << r.imposter_count << '\n';
  }
  if (!os.flush()) throw IoError("failed writing " + path.string());
}

}  // namespace ddh
