#pragma once

// Run configuration: one JSON document that fully determines a run. Parsing
// rejects unknown keys (listing the valid ones) and out-of-range values, and
// to_json emits every resolved default.
//
// {
//   "seed": 0,
//   "data":    {"source": "synthetic" | "cifar10" | "records", "dir", "seed",
//               "classes", "per_class", "test_per_class", "side", "sigma",
//               "train_limit", "test_limit"},
//   "model":   {"encoder": {"kind", "widths", "mlp_hidden", "mlp_out"},
//               "projector": {"hidden_dim", "out_dim"}},
//   "loss":    {"kind", "d", "normalize", ...kind-specific keys},
//   "augment": {"min_area", "max_area", "min_aspect", "max_aspect", "flip_p",
//               "jitter_p", "jitter_strength", "gray_p"},
//   "train":   {"epochs", "lr", "warmup_iters", "drop_factor", "drop_epochs",
//               "batch_origins", "weight_decay", "decoupled_weight_decay",
//               "beta1", "beta2", "eps", "precision", "knn_every", "knn_k",
//               "threads", "deterministic"},
//   "probe":   {"epochs", "lr_start", "lr_end", "weight_decay", "batch_size"}
// }

#include "whitebed/data.hpp"
#include "whitebed/eval.hpp"
#include "whitebed/train.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

namespace whitebed {

enum class DataSource { synthetic, cifar10, records };

struct DataConfig {
  DataSource source = DataSource::synthetic;
  /// cifar10: directory of the binary batches; records: directory with train.bin / test.bin.
  std::string dir;
  /// Synthetic generator seed; defaults to the run seed.
  std::optional<std::uint64_t> seed;
  int classes = 4;
  Index per_class = 64;
  Index test_per_class = 64;
  Index side = 32;
  double sigma = 5.0;
  /// Keep only the first n train / test images (0: all).
  Index train_limit = 0;
  Index test_limit = 0;
};

struct RunConfig {
  std::uint64_t seed = 0;
  DataConfig data;
  TrainConfig train;
  ProbeConfig probe;
};

RunConfig parse_run_config(const nlohmann::json& doc);
nlohmann::json to_json(const RunConfig& cfg);

/// Reads a JSON file (IoError / ConfigError naming the file on failure).
nlohmann::json read_json_file(const std::filesystem::path& file);

/// Applies "a.b.c=value" to a config document. The value is parsed as JSON,
/// falling back to a plain string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

struct LoadedData {
  Dataset train;
  Dataset test;
  std::string name;
};

LoadedData load_data(const RunConfig& cfg);

}  // namespace whitebed
