// Command-line entry point: synthetic data, ROI extraction, training,
// enrollment, matching, evaluation and the experiment drivers.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "ddh/checkpoint.hpp"
#include "ddh/dataset.hpp"
#include "ddh/error.hpp"
#include "ddh/evaluation.hpp"
#include "ddh/grad_check.hpp"
#include "ddh/hash_match.hpp"
#include "ddh/image_io.hpp"
#include "ddh/pipeline.hpp"
#include "ddh/rng.hpp"
#include "ddh/roi.hpp"

namespace fs = std::filesystem;
using namespace ddh;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

constexpr double kGradTolerance = 1e-4;

// Every value a subcommand can read. Each subcommand owns one instance so that
// defaults can differ between subcommands.
struct Settings {
  std::string config;
  std::uint64_t seed = 0;
  std::string out = "out";
  std::string data;
  std::vector<std::string> data_roots;
  std::size_t size = 64;

  // synthetic data
  std::size_t classes = 50;
  std::size_t per_class = 10;

  // training
  std::size_t iterations = kDefaultIterations;
  bool paper_iters = false;
  double learning_rate = 1e-3;
  std::string teacher_optimizer = "adam";
  std::string student_optimizer = "adam";
  std::size_t batch_classes = 8;
  std::size_t batch_per_class = 4;
  std::string precision = "f32";
  std::size_t log_every = 50;
  bool quiet = false;

  // losses
  double margin = 180.0;
  double quant_weight = 0.01;
  double alpha = 1.0;
  double beta = 0.8;
  double temperature = 4.0;
  double direct_weight = 1.0;
  double hinton_weight = 1.0;
  std::string hashing_distance = "squared";
  bool rela_squared = false;
  bool rela_average = false;
  bool use_direct = false;
  bool use_relative = true;
  bool use_hard = true;
  bool use_soft_label = false;

  // split
  double train_fraction = 0.5;
  std::uint64_t split_seed = 0;
  std::size_t train_count = 0;
  std::string subset = "all";

  // networks, galleries, codes
  std::string net;
  std::string teacher;
  std::string gallery;
  std::string image;
  std::string image_b;
  std::string code;
  std::string code_b;
  int threshold = 32;

  // roi
  std::string keypoints;
  std::string images;
  std::size_t roi_size = 128;
  std::string axis = "p3_p9";
  bool zero_pad = false;

  // experiments
  std::size_t seed_count = 5;
  std::string configs = "L_DHN,L_DHN+L_dir,L_DHN+L_rela,L_DHN+L_rela+L_hard";
  std::vector<std::string> names;
  std::size_t instances = 3;
  std::size_t gallery_size = 100000;
  std::size_t bench_images = 64;
};

struct Command {
  CLI::App* app = nullptr;
  std::unique_ptr<Settings> settings = std::make_unique<Settings>();
};

// ---------------------------------------------------------------- options

void add_common(Command& c) {
  auto& s = *c.settings;
  c.app->add_option("--config", s.config, "flat key = value file; keys are the long flag names")
      ->check(CLI::ExistingFile);
  c.app->add_option("--seed", s.seed, "seed for every random choice");
}

void add_out(Command& c) { c.app->add_option("--out", c.settings->out, "output directory"); }

void add_size(Command& c) { c.app->add_option("--size", c.settings->size, "network input side in pixels"); }

void add_data(Command& c, const std::string& what) {
  c.app->add_option("--data", c.settings->data, what + ": root/<class>/<image>")->check(CLI::ExistingDirectory);
}

void add_split(Command& c) {
  auto& s = *c.settings;
  c.app->add_option("--train-fraction", s.train_fraction, "share of each class used for training");
  c.app->add_option("--split-seed", s.split_seed, "seed of the train/test split");
  c.app->add_option("--train-count", s.train_count, "images per class for training; 0 uses --train-fraction");
}

void add_subset(Command& c, const std::string& def) {
  c.settings->subset = def;
  c.app->add_option("--subset", c.settings->subset, "which part of the split to use")
      ->check(CLI::IsMember({"all", "train", "test"}));
}

void add_synthetic(Command& c) {
  auto& s = *c.settings;
  c.app->add_option("--classes", s.classes, "synthetic classes");
  c.app->add_option("--per-class", s.per_class, "synthetic images per class");
}

void add_training(Command& c) {
  auto& s = *c.settings;
  auto* app = c.app;
  auto* iters = app->add_option("--iterations", s.iterations, "training iterations");
  app->add_flag("--paper-iters", s.paper_iters, "train for " + std::to_string(kLongIterations) + " iterations")
      ->excludes(iters);
  app->add_option("--learning-rate", s.learning_rate, "optimizer learning rate");
  app->add_option("--teacher-optimizer", s.teacher_optimizer, "adam or sgd")->check(CLI::IsMember({"adam", "sgd"}));
  app->add_option("--student-optimizer", s.student_optimizer, "adam or sgd")->check(CLI::IsMember({"adam", "sgd"}));
  app->add_option("--batch-classes", s.batch_classes, "classes per batch (k)");
  app->add_option("--batch-per-class", s.batch_per_class, "images per class in a batch (m)");
  app->add_option("--precision", s.precision, "matrix product precision while training")
      ->check(CLI::IsMember({"f32", "f64"}));
  app->add_option("--log-every", s.log_every, "iterations between loss breakdown lines");
  app->add_flag("--quiet", s.quiet, "suppress the loss breakdown lines");
  app->add_option("--margin", s.margin, "hashing loss margin t");
  app->add_option("--quant-weight", s.quant_weight, "quantization weight w");
  app->add_option("--alpha", s.alpha, "relative distillation weight");
  app->add_option("--beta", s.beta, "hard distillation weight");
  app->add_option("--temperature", s.temperature, "soft-label temperature");
  app->add_option("--direct-weight", s.direct_weight, "direct distillation weight");
  app->add_option("--hinton-weight", s.hinton_weight, "soft-label weight");
  app->add_option("--hashing-distance", s.hashing_distance, "squared or euclidean")
      ->check(CLI::IsMember({"squared", "euclidean"}));
  app->add_option("--rela-squared", s.rela_squared, "relative term on squared distances");
  app->add_option("--rela-average", s.rela_average, "relative term averaged over pairs");
}

void add_student_terms(Command& c) {
  auto& s = *c.settings;
  c.app->add_option("--use-direct", s.use_direct, "add the direct code distillation term");
  c.app->add_option("--use-relative", s.use_relative, "add the relative distance term");
  c.app->add_option("--use-hard", s.use_hard, "add the hard sample term");
  c.app->add_option("--use-soft-label", s.use_soft_label, "add the soft-label baseline term");
}

// Values from --config fill every option not given on the command line.
void apply_config_file(CLI::App& app, const std::string& path) {
  std::ifstream is(path);
  if (!is) throw CLI::ValidationError("--config", "cannot read " + path);
  std::string line;
  std::size_t number = 0;
  while (std::getline(is, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    CLI::detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw CLI::ConversionError(path + ":" + std::to_string(number) + ": expected key = value");
    }
    std::string key = CLI::detail::trim_copy(line.substr(0, eq));
    const std::string value = CLI::detail::trim_copy(line.substr(eq + 1));
    std::replace(key.begin(), key.end(), '_', '-');
    CLI::Option* opt = app.get_option_no_throw("--" + key);
    if (opt == nullptr || key == "config" || key == "help") {
      throw CLI::ConversionError(path + ":" + std::to_string(number) + ": unknown key '" + key + "'");
    }
    if (opt->count() > 0) continue;
    opt->add_result(value);
    opt->run_callback();
  }
}

void require(const CLI::App& app, const std::string& flag, const std::string& value) {
  if (value.empty()) throw CLI::RequiredError(app.get_name() + " " + flag);
}

// ---------------------------------------------------------------- helpers

TrainConfig train_config(const Settings& s) {
  TrainConfig cfg;
  cfg.teacher_spec = desk_teacher_spec(s.size);
  cfg.student_spec = desk_student_spec(s.size);
  cfg.loss.margin = s.margin;
  cfg.loss.quant_weight = s.quant_weight;
  cfg.loss.alpha = s.alpha;
  cfg.loss.beta = s.beta;
  cfg.loss.temperature = s.temperature;
  cfg.loss.direct_weight = s.direct_weight;
  cfg.loss.hinton_weight = s.hinton_weight;
  cfg.loss.hashing_distance = distance_kind_from_string(s.hashing_distance);
  cfg.loss.rela_squared = s.rela_squared;
  cfg.loss.rela_average = s.rela_average;
  cfg.teacher_optimizer = optimizer_from_string(s.teacher_optimizer);
  cfg.student_optimizer = optimizer_from_string(s.student_optimizer);
  cfg.learning_rate = s.learning_rate;
  cfg.iterations = s.paper_iters ? kLongIterations : s.iterations;
  cfg.batch_classes = s.batch_classes;
  cfg.batch_per_class = s.batch_per_class;
  cfg.seed = s.seed;
  cfg.terms = {s.use_direct, s.use_relative, s.use_hard, s.use_soft_label};
  cfg.precision = precision_from_string(s.precision);
  cfg.log_every = s.log_every;
  cfg.loss.validate();
  cfg.validate();
  return cfg;
}

SplitSpec split_spec(const Settings& s) { return {s.train_fraction, s.split_seed, s.train_count}; }

LogCallback progress(const Settings& s) {
  if (s.quiet) return {};
  return [](const std::string& role, const LossSample& sample) {
    const auto& t = sample.terms;
    std::cerr << role << " it=" << sample.iteration << " total=" << format_real(t.total)
              << " hashing=" << format_real(t.hashing) << " quantization=" << format_real(t.quantization)
              << " direct=" << format_real(t.direct) << " relative=" << format_real(t.relative)
              << " hard=" << format_real(t.hard) << " soft_label=" << format_real(t.soft_label) << '\n';
  };
}

Dataset select_subset(const Dataset& ds, const Settings& s) {
  if (s.subset == "all") return ds;
  Split parts = split(ds, split_spec(s));
  return s.subset == "train" ? std::move(parts.train) : std::move(parts.test);
}

fs::path output_dir(const Settings& s) {
  const fs::path dir(s.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << text;
  if (!os.flush()) throw IoError("failed writing " + path.string());
}

std::string timings_text(const Timings& t) {
  return "extraction_ms_per_image=" + format_real(t.extraction_ms_per_image) +
         "\nmatching_us_per_pair=" + format_real(t.matching_us_per_pair) + "\n";
}

Tensor network_input(const Network& net, const fs::path& image_path) {
  const auto& spec = net.spec();
  return resize_bilinear(read_image(image_path), spec.input_height, spec.input_width)
      .reshaped({1, spec.input_height, spec.input_width, 1});
}

HashCode encode_image(const Network& net, const fs::path& image_path) {
  const Tensor f = forward(net, network_input(net, image_path));
  return binarize(f.row(0));
}

HashCode code_from(const Settings& s, const std::string& image, const std::string& hex, const std::string& what) {
  if (!hex.empty()) return HashCode::from_hex(hex);
  if (image.empty()) throw CLI::RequiredError("give --" + what + " or --code");
  if (s.net.empty()) throw CLI::RequiredError("--net is needed to encode an image");
  return encode_image(load_checkpoint(s.net, kCodeBits).network, image);
}

// Trains on the train part, evaluates on the test part, writes
// <role>.ckpt, <role>_report.txt and <role>_roc.csv.
int finish_training(const Settings& s, const Split& parts, TrainedNetwork& trained) {
  const fs::path dir = output_dir(s);
  const std::string role = trained.report.role;
  save_checkpoint(trained.net, trained.optimizer, dir / (role + ".ckpt"));
  if (!parts.test.empty()) {
    const fs::path roc = dir / (role + "_roc.csv");
    const auto run = evaluate(trained.net, encode_and_enroll(trained.net, parts.train), parts.test, roc);
    trained.report.metrics = run.summary;
    trained.report.roc_path = roc.filename().string();
    trained.report.timings.extraction_ms_per_image = run.timings.extraction_ms_per_image;
    trained.report.timings.matching_us_per_pair = run.timings.matching_us_per_pair;
  }
  write_text(dir / (role + "_report.txt"), format_report(trained.report, false));
  std::cout << format_report(trained.report, true);
  return kExitOk;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    CLI::detail::trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// ---------------------------------------------------------------- subcommands

int run_gen(const Settings& s) {
  const Dataset ds = gen_synthetic(s.classes, s.per_class, s.size, s.seed);
  const std::size_t n = export_dataset(ds, output_dir(s));
  std::cout << "wrote " << n << " images to " << s.out << '\n';
  return kExitOk;
}

int run_roi(const CLI::App& app, const Settings& s) {
  require(app, "--keypoints", s.keypoints);
  const auto records = read_keypoint_csv(s.keypoints);
  const fs::path base = s.images.empty() ? fs::path(s.keypoints).parent_path() : fs::path(s.images);
  const fs::path dir = output_dir(s);
  const RoiOptions options{s.roi_size, s.zero_pad, axis_mode_from_string(s.axis)};
  std::size_t written = 0;
  std::vector<std::string> failures;
  for (const auto& rec : records) {
    try {
      const Tensor roi = extract_roi(read_image(base / rec.image_path), rec.points, options);
      fs::path target = dir / rec.image_path;
      target.replace_extension(".png");
      fs::create_directories(target.parent_path());
      write_png(roi, target);
      ++written;
    } catch (const Error& e) {
      failures.push_back(rec.image_path + ": " + e.what());
    }
  }
  std::cout << "wrote " << written << " of " << records.size() << " ROIs to " << s.out << '\n';
  for (const auto& f : failures) std::cerr << f << '\n';
  return failures.empty() ? kExitOk : kExitData;
}

int run_train_teacher(const CLI::App& app, const Settings& s) {
  require(app, "--data", s.data);
  const TrainConfig cfg = train_config(s);
  const Split parts = split(load_dataset(s.data, s.size, s.size), split_spec(s));
  TrainedNetwork teacher = train_teacher(cfg, parts.train, progress(s));
  return finish_training(s, parts, teacher);
}

int run_train_student(const CLI::App& app, const Settings& s) {
  require(app, "--data", s.data);
  require(app, "--teacher", s.teacher);
  TrainConfig cfg = train_config(s);
  const Network teacher = load_checkpoint(s.teacher, cfg.student_spec.code_width).network;
  if (teacher.spec().input_height != s.size || teacher.spec().input_width != s.size) {
    throw SpecError("teacher expects " + std::to_string(teacher.spec().input_height) + "x" +
                    std::to_string(teacher.spec().input_width) + " inputs but --size is " + std::to_string(s.size));
  }
  cfg.teacher_spec = teacher.spec();
  const Split parts = split(load_dataset(s.data, s.size, s.size), split_spec(s));
  TrainedNetwork student = train_student(cfg, parts.train, teacher, progress(s));
  return finish_training(s, parts, student);
}

int run_encode(const CLI::App& app, const Settings& s) {
  require(app, "--net", s.net);
  require(app, "--data", s.data);
  const Network net = load_checkpoint(s.net, kCodeBits).network;
  const Dataset ds = select_subset(load_dataset(s.data, net.spec().input_height, net.spec().input_width), s);
  const auto codes = binarize_rows(encode_features(net, ds));
  std::ostringstream os;
  os << "image,label,code\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    os << fs::relative(ds.item(i).source_path, s.data).generic_string() << ',' << ds.label(i) << ','
       << codes[i].hex() << '\n';
  }
  const fs::path path = output_dir(s) / "codes.csv";
  write_text(path, os.str());
  std::cout << "encoded " << ds.size() << " images to " << path.string() << '\n';
  return kExitOk;
}

int run_enroll(const CLI::App& app, const Settings& s) {
  require(app, "--net", s.net);
  require(app, "--data", s.data);
  const Network net = load_checkpoint(s.net, kCodeBits).network;
  const Dataset ds = select_subset(load_dataset(s.data, net.spec().input_height, net.spec().input_width), s);
  const Gallery g = encode_and_enroll(net, ds);
  const fs::path path = output_dir(s) / "gallery.ddhg";
  save_gallery(g, path);
  std::cout << "enrolled " << g.size() << " entries to " << path.string() << '\n';
  return kExitOk;
}

int run_identify(const CLI::App& app, const Settings& s) {
  require(app, "--gallery", s.gallery);
  const Gallery g = load_gallery(s.gallery);
  const Match m = identify(g, code_from(s, s.image, s.code, "image"));
  std::cout << "label=" << m.label << "\ndistance=" << m.distance << "\nentry=" << m.entry_id << '\n';
  return kExitOk;
}

int run_verify(const Settings& s) {
  const HashCode a = code_from(s, s.image, s.code, "image");
  const HashCode b = code_from(s, s.image_b, s.code_b, "image-b");
  const Verification v = verify(a, b, s.threshold);
  std::cout << "accept=" << (v.accept ? 1 : 0) << "\ndistance=" << v.distance << '\n';
  return kExitOk;
}

int run_eval(const CLI::App& app, const Settings& s) {
  require(app, "--gallery", s.gallery);
  require(app, "--net", s.net);
  require(app, "--data", s.data);
  const Gallery g = load_gallery(s.gallery);
  const Network net = load_checkpoint(s.net, kCodeBits).network;
  const Dataset ds = select_subset(load_dataset(s.data, net.spec().input_height, net.spec().input_width), s);
  const fs::path dir = output_dir(s);
  const auto run = evaluate(net, g, ds, dir / "roc.csv");
  const std::string summary = format_summary(run.summary);
  write_text(dir / "summary.txt", summary);
  std::cout << summary << timings_text(run.timings);
  return kExitOk;
}

Dataset experiment_data(const Settings& s) {
  if (!s.data.empty()) return load_dataset(s.data, s.size, s.size);
  return gen_synthetic(s.classes, s.per_class, s.size, s.seed);
}

int run_ablate(const Settings& s) {
  const TrainConfig cfg = train_config(s);
  std::vector<AblationConfig> configs;
  for (const auto& name : split_list(s.configs)) configs.push_back(ablation_config_from_string(name));
  if (s.seed_count == 0) throw ConfigError("--seed-count must be positive");
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < s.seed_count; ++i) seeds.push_back(s.seed + i);
  const auto result = ablation_suite(cfg, experiment_data(s), split_spec(s), seeds, configs, progress(s));

  const fs::path dir = output_dir(s);
  write_ablation_csv(result, dir / "ablation.csv");
  std::ostringstream per_seed;
  per_seed << "config,seed,accuracy,eer\n";
  for (const auto* row : [&] {
         std::vector<const MetricRow*> all{&result.teacher};
         for (const auto& r : result.rows) all.push_back(&r);
         return all;
       }()) {
    for (std::size_t i = 0; i < result.seeds.size(); ++i) {
      per_seed << row->config << ',' << result.seeds[i] << ',' << format_real(row->accuracy[i]) << ','
               << format_real(row->eer[i]) << '\n';
    }
  }
  write_text(dir / "ablation_seeds.csv", per_seed.str());

  std::cout << std::left << std::setw(24) << "config" << "accuracy   eer\n";
  auto line = [](const MetricRow& r) {
    std::cout << std::left << std::setw(24) << r.config << std::fixed << std::setprecision(4) << r.mean_accuracy()
              << "     " << r.mean_eer() << '\n';
  };
  line(result.teacher);
  for (const auto& r : result.rows) line(r);
  std::cout.unsetf(std::ios::fixed);
  return kExitOk;
}

int run_protocol_cmd(const Settings& s) {
  const TrainConfig cfg = train_config(s);
  ProtocolReport report;
  if (s.data_roots.empty()) {
    const Dataset ds = gen_synthetic(s.classes, s.per_class, s.size, s.seed);
    report.rows.push_back(run_protocol(cfg, s.names.empty() ? "synthetic" : s.names[0], ds, split_spec(s),
                                       progress(s)));
  } else {
    if (!s.names.empty() && s.names.size() != s.data_roots.size()) {
      throw ConfigError("--name must be given once per --data");
    }
    for (std::size_t i = 0; i < s.data_roots.size(); ++i) {
      const fs::path root(s.data_roots[i]);
      const std::string name = s.names.empty() ? fs::absolute(root).lexically_normal().filename().string()
                                               : s.names[i];
      report.rows.push_back(run_protocol(cfg, name, load_dataset(root, s.size, s.size), split_spec(s), progress(s)));
    }
  }
  const fs::path dir = output_dir(s);
  const std::string text = format_protocol(report);
  write_text(dir / "protocol.txt", text);
  write_protocol_csv(report, dir / "protocol.csv");
  std::cout << text;
  return kExitOk;
}

int run_bench(const Settings& s) {
  using Clock = std::chrono::steady_clock;
  const TrainConfig cfg = train_config(s);
  struct Column {
    std::string name;
    double size_mb, params, extraction_ms, matching_ms;
  };
  std::vector<Column> columns;
  Rng rng(s.seed);
  Gallery gallery;
  for (std::size_t i = 0; i < s.gallery_size; ++i) {
    HashCode c;
    for (auto& b : c.bytes) b = static_cast<std::uint8_t>(rng.next());
    gallery.enroll("g" + std::to_string(i % 1000), c);
  }
  for (const auto& [name, spec] : {std::pair{std::string("Teacher network"), cfg.teacher_spec},
                                   std::pair{std::string("Student network"), cfg.student_spec}}) {
    const Network net = build_network(spec, s.seed);
    Tensor batch(spec.input_shape(s.bench_images));
    for (auto& v : batch.values()) v = rng.uniform();
    forward(net, batch);  // warm-up
    auto t0 = Clock::now();
    const Tensor f = forward(net, batch);
    const double extraction =
        std::chrono::duration<double, std::milli>(Clock::now() - t0).count() / static_cast<double>(s.bench_images);
    const auto probes = binarize_rows(f);
    t0 = Clock::now();
    long sink = 0;
    for (const auto& p : probes) sink += identify(gallery, p).distance;
    const double per_pair = std::chrono::duration<double, std::milli>(Clock::now() - t0).count() /
                            static_cast<double>(probes.size() * gallery.size());
    if (sink < 0) std::cerr << sink;
    const auto params = static_cast<double>(net.parameter_count());
    columns.push_back({name, params * 4.0 / 1e6, params, extraction, per_pair});
  }
  std::cout << "COMPUTATIONAL COST (" << s.size << "x" << s.size << " input, " << s.gallery_size
            << " gallery codes, single thread)\n";
  std::cout << std::left << std::setw(34) << "" << std::setw(18) << columns[0].name << columns[1].name << '\n';
  auto row = [&](const std::string& label, auto value) {
    std::cout << std::left << std::setw(34) << label << std::setw(18) << value(columns[0]) << value(columns[1])
              << '\n';
  };
  auto fixed = [](double v, int digits) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
  };
  row("Model size (MB, float32)", [&](const Column& c) { return fixed(c.size_mb, 2); });
  row("Total parameters (M)", [&](const Column& c) { return fixed(c.params / 1e6, 3); });
  row("Feature extraction time (ms)", [&](const Column& c) { return fixed(c.extraction_ms, 3); });
  row("Feature matching time (ms/pair)", [&](const Column& c) { return fixed(c.matching_ms, 7); });
  row("Iterations", [&](const Column&) { return std::to_string(cfg.iterations); });
  return kExitOk;
}

int run_grad_check(const Settings& s) {
  const auto suite = run_grad_check_suite(s.seed, s.instances);
  double worst = 0.0;
  std::size_t total = 0;
  for (const auto& r : suite) {
    std::cout << std::left << std::setw(14) << to_string(r.loss) << " instances=" << r.instances
              << " rejected=" << r.rejected << " max_rel_error=" << format_real(r.max_rel_error) << '\n';
    worst = std::max(worst, r.max_rel_error);
    total += r.instances;
  }
  const bool ok = worst < kGradTolerance;
  std::cout << "checked " << total << " instances, max relative error " << format_real(worst)
            << (ok ? " < " : " >= ") << format_real(kGradTolerance) << '\n';
  return ok ? kExitOk : kExitNumeric;
}

int exit_code_for(const Error& e) {
  if (dynamic_cast<const NumericError*>(&e)) return kExitNumeric;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const SpecError*>(&e)) return kExitUsage;
  return kExitData;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deep distillation hashing: palmprint codes, training and evaluation."};
  app.name("ddh");
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  app.option_defaults()->always_capture_default();

  std::map<std::string, Command> commands;
  auto add = [&](const std::string& name, const std::string& help) -> Command& {
    Command& c = commands[name];
    c.app = app.add_subcommand(name, help);
    add_common(c);
    return c;
  };

  {
    auto& c = add("gen", "write a synthetic palmprint-like dataset as PNG files");
    add_synthetic(c);
    add_size(c);
    add_out(c);
  }
  {
    auto& c = add("roi", "crop palm ROIs from images listed in a keypoint CSV");
    auto& s = *c.settings;
    c.app->add_option("--keypoints", s.keypoints, "CSV: image_path, x0, y0, ..., x13, y13")->check(CLI::ExistingFile);
    c.app->add_option("--images", s.images, "directory the image paths are relative to (default: the CSV's)");
    c.app->add_option("--roi-size", s.roi_size, "output side in pixels");
    c.app->add_option("--axis", s.axis, "p3_p9 or perpendicular")->check(CLI::IsMember({"p3_p9", "perpendicular"}));
    c.app->add_flag("--zero-pad", s.zero_pad, "pad outside the image with zeros instead of failing");
    add_out(c);
  }
  {
    auto& c = add("train-teacher", "train the teacher on the train split and evaluate it on the test split");
    add_data(c, "training images");
    add_size(c);
    add_split(c);
    add_training(c);
    add_out(c);
  }
  {
    auto& c = add("train-student", "distil a student from a frozen teacher checkpoint");
    add_data(c, "training images");
    c.app->add_option("--teacher", c.settings->teacher, "teacher checkpoint")->check(CLI::ExistingFile);
    add_size(c);
    add_split(c);
    add_training(c);
    add_student_terms(c);
    add_out(c);
  }
  {
    auto& c = add("encode", "write the hash code of every image to codes.csv");
    c.app->add_option("--net", c.settings->net, "network checkpoint")->check(CLI::ExistingFile);
    add_data(c, "images");
    add_split(c);
    add_subset(c, "all");
    add_out(c);
  }
  {
    auto& c = add("enroll", "encode images into a gallery file");
    c.app->add_option("--net", c.settings->net, "network checkpoint")->check(CLI::ExistingFile);
    add_data(c, "images");
    add_split(c);
    add_subset(c, "train");
    add_out(c);
  }
  {
    auto& c = add("identify", "find the nearest gallery entry to a probe");
    auto& s = *c.settings;
    c.app->add_option("--gallery", s.gallery, "gallery file")->check(CLI::ExistingFile);
    c.app->add_option("--net", s.net, "network checkpoint (with --image)")->check(CLI::ExistingFile);
    c.app->add_option("--image", s.image, "probe image")->check(CLI::ExistingFile);
    c.app->add_option("--code", s.code, "probe code as 32 hex digits");
  }
  {
    auto& c = add("verify", "accept or reject a pair of probes");
    auto& s = *c.settings;
    c.app->add_option("--net", s.net, "network checkpoint (with images)")->check(CLI::ExistingFile);
    c.app->add_option("--image", s.image, "first image")->check(CLI::ExistingFile);
    c.app->add_option("--image-b", s.image_b, "second image")->check(CLI::ExistingFile);
    c.app->add_option("--code", s.code, "first code as 32 hex digits");
    c.app->add_option("--code-b", s.code_b, "second code as 32 hex digits");
    c.app->add_option("--threshold", s.threshold, "accept when the Hamming distance is at most this");
  }
  {
    auto& c = add("eval", "identification accuracy, EER and ROC of a network against a gallery");
    auto& s = *c.settings;
    c.app->add_option("--gallery", s.gallery, "gallery file")->check(CLI::ExistingFile);
    c.app->add_option("--net", s.net, "network checkpoint")->check(CLI::ExistingFile);
    add_data(c, "probe images");
    add_split(c);
    add_subset(c, "test");
    add_out(c);
  }
  {
    auto& c = add("ablate", "loss ablation: one teacher and one student per configuration for each seed");
    auto& s = *c.settings;
    add_data(c, "images (default: synthetic data from --classes/--per-class)");
    add_synthetic(c);
    add_size(c);
    add_split(c);
    add_training(c);
    c.app->add_option("--seed-count", s.seed_count, "seeds --seed, --seed+1, ...");
    c.app->add_option("--configs", s.configs, "comma-separated loss configurations");
    add_out(c);
  }
  {
    auto& c = add("protocol", "student, DDH and teacher accuracy and EER per database");
    auto& s = *c.settings;
    s.train_count = 6;
    c.app->add_option("--data", s.data_roots, "one database root per row (default: synthetic data)")
        ->check(CLI::ExistingDirectory);
    c.app->add_option("--name", s.names, "row name per --data (default: directory name)");
    add_synthetic(c);
    add_size(c);
    add_split(c);
    add_training(c);
    add_out(c);
  }
  {
    auto& c = add("bench", "model size, parameters, extraction and matching time");
    auto& s = *c.settings;
    add_size(c);
    auto* iters = c.app->add_option("--iterations", s.iterations, "training iterations shown in the table");
    c.app->add_flag("--paper-iters", s.paper_iters, "show " + std::to_string(kLongIterations) + " iterations")
        ->excludes(iters);
    c.app->add_option("--gallery-size", s.gallery_size, "random codes to match against");
    c.app->add_option("--images", s.bench_images, "images in the timed extraction batch");
  }
  {
    auto& c = add("grad-check", "finite-difference check of every loss through a small network");
    c.app->add_option("--instances", c.settings->instances, "accepted instances per loss");
  }

  Command* chosen = nullptr;
  try {
    app.parse(argc, argv);
    for (auto& [name, c] : commands) {
      if (c.app->parsed()) chosen = &c;
    }
    if (!chosen->settings->config.empty()) apply_config_file(*chosen->app, chosen->settings->config);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  const Settings& s = *chosen->settings;
  const CLI::App& sub = *chosen->app;
  const std::string name = sub.get_name();
  try {
    if (name == "gen") return run_gen(s);
    if (name == "roi") return run_roi(sub, s);
    if (name == "train-teacher") return run_train_teacher(sub, s);
    if (name == "train-student") return run_train_student(sub, s);
    if (name == "encode") return run_encode(sub, s);
    if (name == "enroll") return run_enroll(sub, s);
    if (name == "identify") return run_identify(sub, s);
    if (name == "verify") return run_verify(s);
    if (name == "eval") return run_eval(sub, s);
    if (name == "ablate") return run_ablate(s);
    if (name == "protocol") return run_protocol_cmd(s);
    if (name == "bench") return run_bench(s);
    if (name == "grad-check") return run_grad_check(s);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << sub.help();
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}
