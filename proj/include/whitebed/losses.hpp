#pragma once

// Self-supervised losses over a batch of projected features V (K x k rows).
// Every loss is a graph construction; the eager helpers evaluate one at 64-bit.

#include "whitebed/autodiff.hpp"
#include "whitebed/slicing.hpp"

#include <random>
#include <string>
#include <utility>
#include <vector>

namespace whitebed {

enum class LossKind { wmse, contrastive, triplet, bn_mse };

const char* loss_name(LossKind kind);
LossKind parse_loss_kind(const std::string& name);

struct LossConfig {
  LossKind kind = LossKind::wmse;
  Index d = 2;
  bool normalize = true;
  /// Contrastive only: whiten features before the similarity.
  bool whiten = false;
  double tau = 0.5;
  double margin = 0.5;
  SliceplanConfig slicing;
  Ridge ridge = Ridge::standard();

  void validate(Index embedding_dim) const;
  /// Copy with slicing.d synced and slicing.sub_size defaulted for this embedding width.
  LossConfig resolved(Index embedding_dim) const;
};

/// ||z_i/|z_i| - z_j/|z_j|||^2 (= 2 - 2 cos) when normalizing, plain squared distance otherwise.
double pair_dist(const RowVec<double>& zi, const RowVec<double>& zj, bool normalize);

/// Hinge max(z_i.z_k - z_i.z_j + margin, 0).
double triplet_loss(const RowVec<double>& zi, const RowVec<double>& zj, const RowVec<double>& zk, double margin);

/// Row index pairs (a < b) of every positive pair: rows sharing an origin id.
std::vector<std::pair<Index, Index>> positive_pairs(const std::vector<Index>& origin_ids);

/// Origin ids of the standard layout: row i*d + j belongs to origin i.
std::vector<Index> layout_origin_ids(Index origins, Index d);

struct LossGraph {
  NodeId loss;
  /// Distance terms averaged per slicing iteration (W-MSE, bn_mse), anchors otherwise.
  Index terms = 0;
};

/// Builds the configured loss on top of node `v`. Rows follow the standard
/// layout with `origins` origins and cfg.d views each. `rng` drives slicing.
template <typename Scalar>
LossGraph build_loss(Graph<Scalar>& graph, NodeId v, Index origins, const LossConfig& cfg, std::mt19937_64& rng);

// Eager 64-bit evaluations.
double wmse_loss(const MatD& v, const LossConfig& cfg, std::mt19937_64& rng);
double contrastive_loss(const MatD& v, const std::vector<Index>& origin_ids, const LossConfig& cfg,
                        std::mt19937_64& rng);
double bn_mse_loss(const MatD& v, const std::vector<Index>& origin_ids, bool normalize = true);

extern template LossGraph build_loss<float>(Graph<float>&, NodeId, Index, const LossConfig&, std::mt19937_64&);
extern template LossGraph build_loss<double>(Graph<double>&, NodeId, Index, const LossConfig&, std::mt19937_64&);

}  // namespace whitebed
