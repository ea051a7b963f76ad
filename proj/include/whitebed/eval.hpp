#pragma once

// Evaluation protocols on frozen encoder features: k-NN with cosine
// similarity, a linear softmax probe, and embedding collapse statistics.

#include "whitebed/data.hpp"
#include "whitebed/model.hpp"

#include "json.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace whitebed {

enum class Precision { f32, f64 };

const char* precision_name(Precision p);
Precision parse_precision(const std::string& name);

/// Evaluation-mode forward (running BN statistics) over the whole dataset in
/// chunks. Returns encoder features h, or projector outputs v when `projector` is set.
MatD extract_features(const ModelConfig& cfg, const ParameterSet& params, const Dataset& data,
                      Precision precision = Precision::f32, Index chunk = 256, bool projector = false);

/// Majority vote over the k most cosine-similar rows of `train`. Neighbour ties
/// go to the lower train index; vote ties to the larger summed similarity, then
/// the lower class id. Zero rows have similarity 0 to everything.
std::vector<int> knn_predict(const MatD& train, const std::vector<int>& train_labels, const MatD& test, Index k,
                             int class_count);

double accuracy(const std::vector<int>& predicted, const std::vector<int>& labels);

struct ProbeConfig {
  Index epochs = 500;
  double lr_start = 1e-2;
  double lr_end = 1e-6;
  double weight_decay = 5e-6;
  Index batch_size = 256;
  std::uint64_t seed = 0;

  void validate() const;
  /// Exponential interpolation from lr_start (epoch 0) to lr_end (last epoch).
  double lr_at(Index epoch) const;
};

struct ProbeResult {
  MatD weight;
  MatD bias;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
};

/// Softmax regression trained with Adam (coupled L2) on fixed features.
ProbeResult fit_linear_probe(const MatD& train, const std::vector<int>& train_labels, const MatD& test,
                             const std::vector<int>& test_labels, int class_count, const ProbeConfig& cfg);

std::vector<int> probe_predict(const ProbeResult& probe, const MatD& features);

struct EmbeddingStats {
  RowVec<double> variance;  // unbiased, per dimension
  /// Mean |corr| over off-diagonal dimension pairs. A pair involving a
  /// zero-variance dimension counts as fully correlated.
  double mean_abs_correlation = 0.0;
};

EmbeddingStats embedding_stats(const MatD& features);

/// Hex FNV-1a of the compact JSON dump.
std::string config_digest(const nlohmann::json& config);

nlohmann::json result_json(const std::string& protocol, const std::string& dataset, std::uint64_t seed, double accuracy,
                           const nlohmann::json& config);

}  // namespace whitebed
