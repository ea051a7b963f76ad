#pragma once

// Self-supervised training loop: positive-view batches, loss dispatch, Adam with
// linear warm-up and step decay, CSV metrics and resumable checkpoints.

#include "whitebed/augment.hpp"
#include "whitebed/data.hpp"
#include "whitebed/eval.hpp"
#include "whitebed/losses.hpp"
#include "whitebed/model.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace whitebed {

/// Purpose tags mixed into derive_seed: view draws use (seed, kViewSeedTag,
/// epoch, dataset index), the slicing permutation (seed, kSliceSeedTag, iteration).
inline constexpr std::uint64_t kViewSeedTag = 0x7669657773ULL;
inline constexpr std::uint64_t kSliceSeedTag = 0x736c696365ULL;

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-6;
  /// false: wd * theta is added to the gradient before the moments (L2).
  /// true: theta shrinks by lr * wd outside the adaptive step.
  bool decoupled = false;
};

struct AdamState {
  std::map<std::string, MatD> m, v;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update of every parameter that has a gradient.
/// A non-finite gradient throws NumericError naming the parameter, before anything is modified.
void adam_step(std::map<std::string, MatD>& params, const std::map<std::string, MatD>& grads, AdamState& state,
               double lr, const AdamConfig& cfg);

struct TrainConfig {
  Index epochs = 200;
  double lr = 3e-3;
  Index warmup_iters = 500;
  double drop_factor = 0.2;
  /// Epoch offsets before the end at which the rate is multiplied by drop_factor.
  std::vector<Index> drop_epochs{50, 25};
  Index batch_origins = 256;
  AdamConfig adam;
  std::uint64_t seed = 0;
  Precision precision = Precision::f32;
  LossConfig loss;
  ModelConfig model;
  AugConfig augment;
  /// Run a 5-NN evaluation every this many epochs (0: never).
  Index knn_every = 0;
  Index knn_k = 5;
  /// Augmentation workers; 0 picks the hardware concurrency.
  int threads = 1;
  /// Leaves ms_per_iter empty so that metrics files compare byte for byte.
  bool deterministic = false;

  void validate() const;
};

/// Linear ramp over the first warmup_iters iterations, then the base rate times
/// drop_factor for every drop epoch max(0, epochs - offset) already reached.
double lr_at(std::int64_t iteration, Index epoch, const TrainConfig& cfg);

struct MetricsRow {
  Index epoch = 0;
  std::int64_t iteration = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::optional<double> ms_per_iter;
  std::optional<double> knn_acc;
  std::optional<double> linear_acc;
};

inline constexpr const char* kMetricsHeader = "epoch,iter,loss,lr,ms_per_iter,knn_acc,linear_acc";

/// One CSV line (no newline). Floats use a fixed 10-significant-digit format.
std::string format_metrics_row(const MetricsRow& row);

/// Positive views of the given origins in the standard layout (row i*d + j is
/// view j of origins[i]). View draws are keyed by (seed, epoch, dataset index).
MatF make_view_batch(const Dataset& data, const std::vector<Index>& origins, Index d, std::uint64_t seed, Index epoch,
                     const AugConfig& aug, int threads = 1);

/// Wall-clock split of one step, used by the benchmark.
struct StepTimings {
  double augment_ms = 0, forward_ms = 0, whitening_forward_ms = 0, backward_ms = 0, whitening_backward_ms = 0,
         optimizer_ms = 0, total_ms = 0;
};

class Trainer {
 public:
  /// Fresh parameters from init_params(cfg.model, cfg.seed).
  Trainer(TrainConfig cfg, const Dataset& train);

  const TrainConfig& config() const { return cfg_; }
  const ParameterSet& params() const { return params_; }
  const AdamState& optimizer() const { return adam_; }
  /// Next epoch to run and number of optimizer steps taken so far.
  Index epoch() const { return epoch_; }
  std::int64_t iteration() const { return iteration_; }
  Index steps_per_epoch() const;

  /// One optimizer step on the given origins. Errors carry the epoch and iteration.
  MetricsRow train_step(const std::vector<Index>& origins, StepTimings* timings = nullptr);

  /// All steps of the current epoch; advances epoch().
  std::vector<MetricsRow> run_epoch();

  /// Parameters, running statistics, Adam moments and counters. `meta` is merged in.
  Checkpoint checkpoint(const nlohmann::json& meta = nlohmann::json::object()) const;
  /// Restores a checkpoint made by checkpoint() for the same model config.
  void restore(const Checkpoint& ckpt);

 private:
  template <typename Scalar>
  MetricsRow step_impl(const std::vector<Index>& origins, StepTimings* timings);

  TrainConfig cfg_;
  const Dataset& data_;
  ParameterSet params_;
  AdamState adam_;
  Index epoch_ = 0;
  std::int64_t iteration_ = 0;
};

struct FitOptions {
  std::filesystem::path out_dir;
  /// Evaluation sets for the periodic k-NN (memory bank and queries); both or neither.
  const Dataset* knn_memory = nullptr;
  const Dataset* knn_query = nullptr;
  /// Continue from this checkpoint instead of initializing.
  std::optional<std::filesystem::path> resume;
  /// Stored in every checkpoint under "config".
  nlohmann::json config_json = nlohmann::json::object();
  /// Also receives each row as it is written.
  std::function<void(const MetricsRow&)> on_row;
};

struct FitResult {
  std::filesystem::path checkpoint;
  std::filesystem::path metrics;
  std::vector<MetricsRow> rows;
};

/// Writes out_dir/init.ckpt (fresh runs), appends to out_dir/metrics.csv and
/// writes out_dir/final.ckpt after every epoch.
FitResult fit(const TrainConfig& cfg, const Dataset& train, const FitOptions& options);

}  // namespace whitebed
