#pragma once

// Batch slicing: the K = N*d batch is split into d partitions (one view of
// every origin each), a single random permutation of origins is applied to all
// partitions, and each permuted partition is chopped into sub-batches that are
// whitened independently.
//
// Batch layout convention: row i*d + j holds view j of origin i.

#include "whitebed/autodiff.hpp"
#include "whitebed/linalg.hpp"

#include <random>
#include <vector>

namespace whitebed {

struct SliceplanConfig {
  Index d = 2;
  /// Samples per sub-batch. 0 means "2 x embedding dimension".
  Index sub_size = 0;
  Index iterations = 1;

  Index resolved_sub_size(Index embedding_dim) const { return sub_size > 0 ? sub_size : 2 * embedding_dim; }
  /// Throws ConfigError when the plan cannot whiten `embedding_dim`-wide features.
  void validate(Index embedding_dim) const;
};

struct SliceAssignment {
  Index partition = 0;
  Index sub_batch = 0;
};

class Sliceplan {
 public:
  Sliceplan(Index origins, Index d, Index sub_size, std::vector<Index> permutation);

  Index origins() const { return origins_; }
  Index d() const { return d_; }
  Index sub_size() const { return sub_size_; }
  Index rows() const { return origins_ * d_; }
  Index sub_batches_per_partition() const { return origins_ / sub_size_; }
  Index sub_batch_count() const { return d_ * sub_batches_per_partition(); }

  const std::vector<Index>& permutation() const { return permutation_; }
  /// Partition and sub-batch of batch row `position`.
  const SliceAssignment& assignment(Index position) const { return assignment_[static_cast<std::size_t>(position)]; }
  /// Batch rows of one sub-batch, in permuted order.
  const std::vector<Index>& members(Index partition, Index sub_batch) const;

 private:
  Index origins_, d_, sub_size_;
  std::vector<Index> permutation_;
  std::vector<SliceAssignment> assignment_;
  std::vector<std::vector<Index>> members_;
};

/// Draws one shared origin permutation and builds the sub-batch partition.
Sliceplan make_sliceplan(Index origins, const SliceplanConfig& cfg, std::mt19937_64& rng);

/// Whitens every sub-batch with its own statistics; rows stay at their batch positions.
MatD whiten_sliced(const MatD& v, const Sliceplan& plan, const Ridge& ridge);

/// Graph form of whiten_sliced: gather per sub-batch, whiten, concatenate, scatter back.
template <typename Scalar>
NodeId whiten_sliced(Graph<Scalar>& graph, NodeId v, const Sliceplan& plan, const Ridge& ridge);

extern template NodeId whiten_sliced<float>(Graph<float>&, NodeId, const Sliceplan&, const Ridge&);
extern template NodeId whiten_sliced<double>(Graph<double>&, NodeId, const Sliceplan&, const Ridge&);

}  // namespace whitebed
