#include "whitebed/slicing.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace whitebed {

void SliceplanConfig::validate(Index embedding_dim) const {
  if (d < 2) throw ConfigError("slicing: d must be at least 2, got " + std::to_string(d));
  if (iterations < 1) throw ConfigError("slicing: iterations must be at least 1, got " + std::to_string(iterations));
  const Index size = resolved_sub_size(embedding_dim);
  if (size < embedding_dim + 1) {
    throw ConfigError("slicing: sub_size " + std::to_string(size) + " must be at least embedding_dim + 1 = " +
                      std::to_string(embedding_dim + 1));
  }
}

Sliceplan::Sliceplan(Index origins, Index d, Index sub_size, std::vector<Index> permutation)
    : origins_(origins), d_(d), sub_size_(sub_size), permutation_(std::move(permutation)) {
  if (d_ < 1 || sub_size_ < 1 || origins_ < 1) throw ConfigError("sliceplan: sizes must be positive");
  if (origins_ % sub_size_ != 0) {
    throw ConfigError("sliceplan: " + std::to_string(origins_) + " origins do not split into sub-batches of " +
                      std::to_string(sub_size_));
  }
  if (static_cast<Index>(permutation_.size()) != origins_) throw ConfigError("sliceplan: permutation size mismatch");

  const Index per_partition = origins_ / sub_size_;
  assignment_.resize(static_cast<std::size_t>(rows()));
  members_.assign(static_cast<std::size_t>(d_ * per_partition), {});
  for (Index p = 0; p < d_; ++p) {
    for (Index slot = 0; slot < origins_; ++slot) {
      const Index s = slot / sub_size_;
      const Index position = permutation_[static_cast<std::size_t>(slot)] * d_ + p;
      assignment_[static_cast<std::size_t>(position)] = {p, s};
      members_[static_cast<std::size_t>(p * per_partition + s)].push_back(position);
    }
  }
}

const std::vector<Index>& Sliceplan::members(Index partition, Index sub_batch) const {
  if (partition < 0 || partition >= d_ || sub_batch < 0 || sub_batch >= sub_batches_per_partition()) {
    throw Error("sliceplan: no sub-batch (" + std::to_string(partition) + ", " + std::to_string(sub_batch) + ")");
  }
  return members_[static_cast<std::size_t>(partition * sub_batches_per_partition() + sub_batch)];
}

Sliceplan make_sliceplan(Index origins, const SliceplanConfig& cfg, std::mt19937_64& rng) {
  if (cfg.d < 2) throw ConfigError("sliceplan: d must be at least 2");
  if (cfg.sub_size < 1) throw ConfigError("sliceplan: sub_size must be resolved before planning");
  if (origins % cfg.sub_size != 0) {
    throw ConfigError("sliceplan: " + std::to_string(origins) + " origins are not divisible by sub_size " +
                      std::to_string(cfg.sub_size));
  }
  std::vector<Index> perm(static_cast<std::size_t>(origins));
  std::iota(perm.begin(), perm.end(), Index{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  return Sliceplan(origins, cfg.d, cfg.sub_size, std::move(perm));
}

namespace {

std::string sub_batch_label(Index p, Index s) {
  return "sub-batch (partition " + std::to_string(p) + ", index " + std::to_string(s) + ")";
}

}  // namespace

MatD whiten_sliced(const MatD& v, const Sliceplan& plan, const Ridge& ridge) {
  if (v.rows() != plan.rows()) {
    throw ShapeError("whiten_sliced: batch has " + std::to_string(v.rows()) + " rows, plan covers " +
                     std::to_string(plan.rows()));
  }
  MatD z(v.rows(), v.cols());
  for (Index p = 0; p < plan.d(); ++p) {
    for (Index s = 0; s < plan.sub_batches_per_partition(); ++s) {
      const auto& rows = plan.members(p, s);
      MatD part(static_cast<Index>(rows.size()), v.cols());
      for (std::size_t r = 0; r < rows.size(); ++r) part.row(static_cast<Index>(r)) = v.row(rows[r]);
      try {
        MatD zp = whiten_batch(part, ridge).z;
        for (std::size_t r = 0; r < rows.size(); ++r) z.row(rows[r]) = zp.row(static_cast<Index>(r));
      } catch (const NotPositiveDefinite& e) {
        throw NotPositiveDefinite(e.pivot(), sub_batch_label(p, s) + ": " + e.what());
      }
    }
  }
  return z;
}

template <typename Scalar>
NodeId whiten_sliced(Graph<Scalar>& graph, NodeId v, const Sliceplan& plan, const Ridge& ridge) {
  std::vector<NodeId> parts;
  std::vector<Index> inverse(static_cast<std::size_t>(plan.rows()), -1);
  Index offset = 0;
  for (Index p = 0; p < plan.d(); ++p) {
    for (Index s = 0; s < plan.sub_batches_per_partition(); ++s) {
      const auto& rows = plan.members(p, s);
      auto gathered = graph.slice_rows(v, rows);
      parts.push_back(graph.whitening(gathered, ridge, sub_batch_label(p, s)));
      for (std::size_t r = 0; r < rows.size(); ++r) inverse[static_cast<std::size_t>(rows[r])] = offset + Index(r);
      offset += static_cast<Index>(rows.size());
    }
  }
  auto stacked = parts.size() == 1 ? parts.front() : graph.concat_rows(parts);
  return graph.slice_rows(stacked, std::move(inverse));
}

template NodeId whiten_sliced<float>(Graph<float>&, NodeId, const Sliceplan&, const Ridge&);
template NodeId whiten_sliced<double>(Graph<double>&, NodeId, const Sliceplan&, const Ridge&);

}  // namespace whitebed
