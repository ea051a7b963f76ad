#pragma once

// Encoder E and projection head g, their parameters, and the checkpoint file.
//
// Checkpoint layout (little-endian):
//   8 bytes   magic "WBCKPT01"
//   8 bytes   uint64 header length H
//   H bytes   JSON header {"tensors": [{"name", "shape": [r, c], "dtype": "f64",
//             "offset", "nbytes"}...], "meta": {...}}
//   data      raw row-major float64 tensors; offsets are relative to the data start

#include "whitebed/autodiff.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace whitebed {

enum class EncoderKind { mlp, smallconv };

const char* encoder_name(EncoderKind kind);
EncoderKind parse_encoder_kind(const std::string& name);

struct EncoderConfig {
  EncoderKind kind = EncoderKind::smallconv;
  ImageShape input{3, 32, 32};
  /// smallconv: output channels of the four conv blocks; h_dim is the last one.
  std::vector<Index> widths{32, 64, 96, 256};
  /// mlp: hidden width and output width.
  Index mlp_hidden = 512;
  Index mlp_out = 256;

  Index h_dim() const;
  void validate() const;
};

struct ProjectorConfig {
  Index hidden_dim = 1024;
  Index out_dim = 64;
};

struct ModelConfig {
  EncoderConfig encoder;
  ProjectorConfig projector;

  void validate() const;
};

/// Master copy of every learnable tensor plus batch-norm running statistics, in float64.
struct ParameterSet {
  std::vector<std::string> order;
  std::map<std::string, MatD> values;
  std::map<std::string, RunningStats<double>> buffers;

  void add(const std::string& name, MatD value);
  const MatD& at(const std::string& name) const;
  MatD& at(const std::string& name);
  Index parameter_count() const;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit BN scale,
/// zero BN shift, running mean 0 and variance 1. Each tensor's draw is keyed by
/// (seed, name), so adding a layer does not reshuffle the others.
ParameterSet init_params(const ModelConfig& cfg, std::uint64_t seed);

/// Scalar-typed running statistics used while one graph is alive.
template <typename Scalar>
struct ModelState {
  std::map<std::string, RunningStats<Scalar>> running;

  explicit ModelState(const ParameterSet& params);
  /// Copies updated running statistics back into the master set.
  void commit(ParameterSet& params) const;
};

struct ModelNodes {
  NodeId h;
  /// Projector output; equals h when the projector is skipped.
  NodeId v;
};

/// Adds the encoder (and optionally the projector) on top of input node `x`
/// (one flattened channel-major image per row). In training mode BN uses batch
/// statistics and updates `state`; otherwise it reads the running statistics.
template <typename Scalar>
ModelNodes build_model(Graph<Scalar>& graph, NodeId x, const ModelConfig& cfg, const ParameterSet& params,
                       ModelState<Scalar>& state, bool training, bool with_projector = true);

struct NamedTensor {
  std::string name;
  MatD value;
};

struct Checkpoint {
  std::vector<NamedTensor> tensors;
  nlohmann::json meta = nlohmann::json::object();

  const MatD* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& file, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& file);

/// Parameters under their own names, BN statistics as "<layer>.running_mean" / ".running_var".
void pack_params(const ParameterSet& params, Checkpoint& ckpt);
/// Restores into a set created by init_params for the same config; shapes must match.
void unpack_params(const Checkpoint& ckpt, ParameterSet& params);

nlohmann::json to_json(const ModelConfig& cfg);

extern template struct ModelState<float>;
extern template struct ModelState<double>;
extern template ModelNodes build_model<float>(Graph<float>&, NodeId, const ModelConfig&, const ParameterSet&,
                                              ModelState<float>&, bool, bool);
extern template ModelNodes build_model<double>(Graph<double>&, NodeId, const ModelConfig&, const ParameterSet&,
                                               ModelState<double>&, bool, bool);

}  // namespace whitebed
