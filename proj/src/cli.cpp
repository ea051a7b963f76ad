#include "whitebed/cli.hpp"

#include "whitebed/bench.hpp"
#include "whitebed/config.hpp"
#include "whitebed/errors.hpp"
#include "whitebed/eval.hpp"
#include "whitebed/plot.hpp"
#include "whitebed/train.hpp"

#include "CLI11.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

namespace whitebed {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string data_dir;
  std::string out_dir = "out";
  bool deterministic = false;
  std::optional<int> threads;
  std::optional<Index> epochs;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON run configuration");
  cmd->add_option("--seed", c.seed, "Run seed (overrides the config)");
  cmd->add_option("--data-dir", c.data_dir, "Dataset directory (cifar10 / records sources)")->envname("WHITEBED_DATA");
  cmd->add_option("--out-dir", c.out_dir, "Output directory")->capture_default_str();
  cmd->add_flag("--deterministic", c.deterministic, "Single-threaded, no timing column: byte-reproducible metrics");
  cmd->add_option("--threads", c.threads, "Augmentation threads (0: all cores)");
  cmd->add_option("--epochs", c.epochs, "Training epochs (overrides the config)");
  cmd->add_option("--set", c.overrides, "Config override key.path=value (repeatable)");
}

void write_file(const fs::path& file, const std::string& text) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary);
  out << text;
  if (!out) throw IoError("cannot write " + file.string());
}

/// Assembles the run config: base document, overrides, then flags.
RunConfig build_config(const Common& c, json doc) {
  if (!c.config.empty()) doc = read_json_file(c.config);
  if (!doc.is_object()) throw ConfigError("config: top level must be an object");
  for (const auto& o : c.overrides) apply_override(doc, o);
  if (c.seed) {
    doc["seed"] = *c.seed;
    if (doc.contains("data") && doc["data"].is_object()) doc["data"].erase("seed");
  }
  if (c.epochs) doc["train"]["epochs"] = *c.epochs;
  if (c.threads) doc["train"]["threads"] = *c.threads;
  if (c.deterministic) {
    doc["train"]["deterministic"] = true;
    doc["train"]["threads"] = 1;
  }
  if (!c.data_dir.empty()) doc["data"]["dir"] = c.data_dir;
  return parse_run_config(doc);
}

/// Config stored in a checkpoint, used when --config is absent.
json checkpoint_config(const Checkpoint& ck) {
  if (ck.meta.contains("config") && ck.meta.at("config").is_object()) return ck.meta.at("config");
  throw ConfigError("checkpoint carries no run config; pass --config");
}

ParameterSet load_encoder(const RunConfig& cfg, const Checkpoint& ck) {
  ParameterSet ps = init_params(cfg.train.model, cfg.seed);
  unpack_params(ck, ps);
  return ps;
}

int run_train(const Common& c, const std::string& resume, std::ostream& out) {
  json base = json::object();
  if (!resume.empty() && c.config.empty()) base = checkpoint_config(load_checkpoint(resume));
  const RunConfig cfg = build_config(c, base);
  const fs::path dir = c.out_dir;
  fs::create_directories(dir);
  const json resolved = to_json(cfg);
  write_file(dir / "resolved_config.json", resolved.dump(2) + "\n");
  const LoadedData data = load_data(cfg);

  FitOptions opt;
  opt.out_dir = dir;
  opt.config_json = resolved;
  if (cfg.train.knn_every > 0) {
    opt.knn_memory = &data.train;
    opt.knn_query = &data.test;
  }
  if (!resume.empty()) opt.resume = resume;
  const FitResult r = fit(cfg.train, data.train, opt);
  out << "trained " << r.rows.size() << " steps on " << data.name << " (" << data.train.size() << " images)";
  if (!r.rows.empty()) out << ", last loss " << r.rows.back().loss;
  out << "\ncheckpoint: " << r.checkpoint.string() << "\nmetrics: " << r.metrics.string() << "\n";
  return 0;
}

int run_eval(const Common& c, const std::string& ckpt_path, bool linear, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  const RunConfig cfg = build_config(c, c.config.empty() ? checkpoint_config(ck) : json::object());
  const ParameterSet ps = load_encoder(cfg, ck);
  const LoadedData data = load_data(cfg);
  if (data.train.class_count != data.test.class_count) throw Error("train and test class counts differ");
  const MatD ftr = extract_features(cfg.train.model, ps, data.train, cfg.train.precision);
  const MatD fte = extract_features(cfg.train.model, ps, data.test, cfg.train.precision);

  json result;
  std::string file;
  if (linear) {
    const ProbeResult p = fit_linear_probe(ftr, data.train.labels, fte, data.test.labels, data.test.class_count, cfg.probe);
    result = result_json("linear", data.name, cfg.seed, p.test_accuracy, to_json(cfg));
    result["train_accuracy"] = p.train_accuracy;
    file = "linear_results.json";
  } else {
    const auto pred = knn_predict(ftr, data.train.labels, fte, cfg.train.knn_k, data.test.class_count);
    result = result_json("knn", data.name, cfg.seed, accuracy(pred, data.test.labels), to_json(cfg));
    result["k"] = cfg.train.knn_k;
    file = "knn_results.json";
  }
  result["checkpoint"] = ckpt_path;
  write_file(fs::path(c.out_dir) / file, result.dump(2) + "\n");
  out << result.at("protocol").get<std::string>() << " accuracy " << result.at("accuracy").get<double>() << "\n";
  return 0;
}

int run_bench(const Common& c, Index warmup, Index steps, std::ostream& out) {
  const RunConfig cfg = build_config(c, json::object());
  const LoadedData data = load_data(cfg);
  const BenchReport r = bench_step(cfg.train, data.train, warmup, steps);
  write_file(fs::path(c.out_dir) / "bench.csv", r.csv());
  out << r.csv();
  return 0;
}

int run_plot(const std::string& csv, const std::string& cols, double smooth, std::string svg, std::ostream& out) {
  std::vector<std::string> columns;
  std::stringstream ss(cols);
  for (std::string col; std::getline(ss, col, ',');)
    if (!col.empty()) columns.push_back(col);
  const std::string text = plot_metrics(read_csv(csv), columns, smooth);
  if (svg.empty()) svg = fs::path(csv).replace_extension(".svg").string();
  write_file(svg, text);
  out << "wrote " << svg << "\n";
  return 0;
}

int run_gen_data(const Common& c, std::ostream& out) {
  const RunConfig cfg = build_config(c, json::object());
  if (cfg.data.source != DataSource::synthetic) throw ConfigError("gen-data writes the synthetic source only");
  if (cfg.data.side != kCifarSide) throw ConfigError("gen-data: the record format holds 32x32 images; set data.side to 32");
  const LoadedData data = load_data(cfg);
  const fs::path dir = c.out_dir;
  fs::create_directories(dir);
  write_cifar_file(dir / "train.bin", data.train);
  write_cifar_file(dir / "test.bin", data.test);
  json meta = to_json(cfg)["data"];
  write_file(dir / "data.json", meta.dump(2) + "\n");
  out << "wrote " << data.train.size() << " train and " << data.test.size() << " test records to " << dir.string()
      << " (use data.source=records, data.classes=" << cfg.data.classes << ")\n";
  return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"whitebed: whitening-based self-supervised learning workbench"};
  app.require_subcommand(1);
  Common common;
  std::string resume, ckpt, csv, cols = "loss", svg;
  double smooth = 0.0;
  Index warmup = 3, steps = 20;

  auto* train = app.add_subcommand("train", "Self-supervised training");
  add_common(train, common);
  train->add_option("--resume", resume, "Continue from a training checkpoint");

  auto* eval_linear = app.add_subcommand("eval-linear", "Linear probe on frozen encoder features");
  auto* eval_knn = app.add_subcommand("eval-knn", "k-NN classification on frozen encoder features");
  for (auto* cmd : {eval_linear, eval_knn}) {
    add_common(cmd, common);
    cmd->add_option("--ckpt", ckpt, "Encoder checkpoint")->required();
  }

  auto* bench = app.add_subcommand("bench", "Per-step timing breakdown");
  add_common(bench, common);
  bench->add_option("--warmup", warmup, "Unmeasured warm-up steps")->capture_default_str();
  bench->add_option("--steps", steps, "Measured steps (>= 10)")->capture_default_str();

  auto* plot = app.add_subcommand("plot", "SVG chart of metrics CSV columns against epoch");
  plot->add_option("--csv", csv, "Metrics CSV")->required();
  plot->add_option("--cols", cols, "Comma-separated columns")->capture_default_str();
  plot->add_option("--smooth", smooth, "Moving-average weight in [0, 1)")->capture_default_str();
  plot->add_option("--out", svg, "Output SVG (default: CSV name with .svg)");

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic dataset as train.bin / test.bin records");
  add_common(gen, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (train->parsed()) return run_train(common, resume, out);
    if (eval_linear->parsed()) return run_eval(common, ckpt, true, out);
    if (eval_knn->parsed()) return run_eval(common, ckpt, false, out);
    if (bench->parsed()) return run_bench(common, warmup, steps, out);
    if (plot->parsed()) return run_plot(csv, cols, smooth, svg, out);
    if (gen->parsed()) return run_gen_data(common, out);
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (char& ch : msg)
      if (ch == '\n') ch = ' ';
    err << "error: " << msg << "\n";
    return 1;
  }
  return 1;
}

}  // namespace whitebed
