#include "whitebed/losses.hpp"

#include <algorithm>
#include <map>

namespace whitebed {

const char* loss_name(LossKind kind) {
  switch (kind) {
    case LossKind::wmse: return "wmse";
    case LossKind::contrastive: return "contrastive";
    case LossKind::triplet: return "triplet";
    case LossKind::bn_mse: return "bn_mse";
  }
  return "?";
}

LossKind parse_loss_kind(const std::string& name) {
  for (LossKind k : {LossKind::wmse, LossKind::contrastive, LossKind::triplet, LossKind::bn_mse}) {
    if (name == loss_name(k)) return k;
  }
  throw ConfigError("unknown loss kind '" + name + "' (valid: wmse, contrastive, triplet, bn_mse)");
}

void LossConfig::validate(Index embedding_dim) const {
  if (d < 2) throw ConfigError("loss.d must be at least 2, got " + std::to_string(d));
  if (kind == LossKind::contrastive && !(tau > 0.0)) throw ConfigError("loss.tau must be > 0");
  if (kind == LossKind::triplet && !(margin >= 0.0)) throw ConfigError("loss.margin must be >= 0");
  if (ridge.absolute < 0.0 || ridge.relative < 0.0) throw ConfigError("loss.ridge must be >= 0");
  if (kind == LossKind::wmse || (kind == LossKind::contrastive && whiten)) {
    SliceplanConfig s = slicing;
    s.d = d;
    s.validate(embedding_dim);
  }
}

LossConfig LossConfig::resolved(Index embedding_dim) const {
  LossConfig c = *this;
  c.slicing.d = d;
  c.slicing.sub_size = slicing.resolved_sub_size(embedding_dim);
  return c;
}

double pair_dist(const RowVec<double>& zi, const RowVec<double>& zj, bool normalize) {
  if (zi.size() != zj.size()) throw ShapeError("pair_dist: vectors differ in length");
  if (!normalize) return (zi - zj).squaredNorm();
  const double ni = zi.norm(), nj = zj.norm();
  if (!(ni > 0.0) || !(nj > 0.0)) throw Error("pair_dist: zero vector cannot be normalized");
  return (zi / ni - zj / nj).squaredNorm();
}

double triplet_loss(const RowVec<double>& zi, const RowVec<double>& zj, const RowVec<double>& zk, double margin) {
  return std::max(zi.dot(zk) - zi.dot(zj) + margin, 0.0);
}

std::vector<std::pair<Index, Index>> positive_pairs(const std::vector<Index>& origin_ids) {
  std::map<Index, std::vector<Index>> groups;
  for (std::size_t r = 0; r < origin_ids.size(); ++r) groups[origin_ids[r]].push_back(static_cast<Index>(r));
  std::vector<std::pair<Index, Index>> pairs;
  for (const auto& [id, rows] : groups) {
    for (std::size_t a = 0; a < rows.size(); ++a)
      for (std::size_t b = a + 1; b < rows.size(); ++b) pairs.emplace_back(rows[a], rows[b]);
  }
  return pairs;
}

std::vector<Index> layout_origin_ids(Index origins, Index d) {
  std::vector<Index> ids(static_cast<std::size_t>(origins * d));
  for (Index r = 0; r < origins * d; ++r) ids[static_cast<std::size_t>(r)] = r / d;
  return ids;
}

namespace {

// Positive of each anchor: the next row (cyclically) sharing its origin id.
std::vector<Index> contrastive_targets(const std::vector<Index>& origin_ids) {
  std::map<Index, std::vector<Index>> groups;
  for (std::size_t r = 0; r < origin_ids.size(); ++r) groups[origin_ids[r]].push_back(static_cast<Index>(r));
  std::vector<Index> targets(origin_ids.size(), -1);
  for (const auto& [id, rows] : groups) {
    if (rows.size() < 2) throw Error("contrastive: origin " + std::to_string(id) + " has no positive view");
    for (std::size_t a = 0; a < rows.size(); ++a) targets[static_cast<std::size_t>(rows[a])] = rows[(a + 1) % rows.size()];
  }
  return targets;
}

template <typename Scalar>
NodeId pair_mse(Graph<Scalar>& graph, NodeId z, const std::vector<std::pair<Index, Index>>& pairs) {
  std::vector<Index> first, second;
  first.reserve(pairs.size());
  second.reserve(pairs.size());
  for (const auto& [a, b] : pairs) {
    first.push_back(a);
    second.push_back(b);
  }
  return graph.mse_mean(graph.slice_rows(z, std::move(first)), graph.slice_rows(z, std::move(second)));
}


}  // namespace

template <typename Scalar>
LossGraph build_loss(Graph<Scalar>& graph, NodeId v, Index origins, const LossConfig& cfg, std::mt19937_64& rng) {
  if (cfg.d < 2) throw ConfigError("loss.d must be at least 2");
  const auto ids = layout_origin_ids(origins, cfg.d);

  switch (cfg.kind) {
    case LossKind::wmse: {
      if (cfg.slicing.sub_size < 1) throw ConfigError("wmse: slicing.sub_size must be resolved");
      SliceplanConfig sc = cfg.slicing;
      sc.d = cfg.d;
      const auto pairs = positive_pairs(ids);
      std::vector<NodeId> terms;
      for (Index it = 0; it < cfg.slicing.iterations; ++it) {
        Sliceplan plan = make_sliceplan(origins, sc, rng);
        NodeId z = whiten_sliced(graph, v, plan, cfg.ridge);
        if (cfg.normalize) z = graph.l2_normalize_rows(z);
        terms.push_back(pair_mse(graph, z, pairs));
      }
      NodeId loss = terms.front();
      const Scalar w = Scalar(1.0 / double(terms.size()));
      if (terms.size() > 1) {
        loss = graph.scale_add(terms[0], terms[1], w, w);
        for (std::size_t i = 2; i < terms.size(); ++i) loss = graph.scale_add(loss, terms[i], Scalar(1), w);
      }
      return {loss, static_cast<Index>(pairs.size())};
    }

    case LossKind::contrastive: {
      NodeId z = v;
      if (cfg.whiten) {
        if (cfg.slicing.sub_size < 1) throw ConfigError("contrastive: slicing.sub_size must be resolved");
        SliceplanConfig sc = cfg.slicing;
        sc.d = cfg.d;
        z = whiten_sliced(graph, z, make_sliceplan(origins, sc, rng), cfg.ridge);
      }
      if (cfg.normalize) z = graph.l2_normalize_rows(z);
      auto logits = graph.scale_add(graph.matmul(z, z, true), std::nullopt, Scalar(1.0 / cfg.tau), Scalar(0));
      return {graph.softmax_cross_entropy(logits, contrastive_targets(ids), true), static_cast<Index>(ids.size())};
    }

    case LossKind::triplet: {
      if (origins < 2) throw ConfigError("triplet: need at least two origins for negatives");
      NodeId z = cfg.normalize ? graph.l2_normalize_rows(v) : v;
      std::vector<Index> anchors, positives, negatives;
      for (Index i = 0; i < origins; ++i) {
        for (Index j = 0; j < cfg.d; ++j) {
          anchors.push_back(i * cfg.d + j);
          positives.push_back(i * cfg.d + (j + 1) % cfg.d);
          negatives.push_back(((i + 1) % origins) * cfg.d + j);
        }
      }
      const Index count = static_cast<Index>(anchors.size());
      auto a = graph.slice_rows(z, std::move(anchors));
      auto p = graph.slice_rows(z, std::move(positives));
      auto n = graph.slice_rows(z, std::move(negatives));
      auto hinge = graph.relu(
          graph.scale_add(graph.row_dot(a, n), graph.row_dot(a, p), Scalar(1), Scalar(-1), Scalar(cfg.margin)));
      return {graph.sum_all(hinge, Scalar(1.0 / double(count))), count};
    }

    case LossKind::bn_mse: {
      StandardizeOptions<Scalar> opt;
      opt.eps = 1e-5;
      NodeId z = graph.batch_standardize(v, opt);
      if (cfg.normalize) z = graph.l2_normalize_rows(z);
      const auto pairs = positive_pairs(ids);
      return {pair_mse(graph, z, pairs), static_cast<Index>(pairs.size())};
    }
  }
  throw Error("build_loss: unknown loss kind");
}

double wmse_loss(const MatD& v, const LossConfig& cfg, std::mt19937_64& rng) {
  if (v.rows() % cfg.d != 0) throw ShapeError("wmse_loss: rows are not a multiple of d");
  LossConfig c = cfg.resolved(v.cols());
  c.kind = LossKind::wmse;
  Graph<double> g;
  auto in = g.input("v", v.cols());
  g.set_output(build_loss(g, in, v.rows() / cfg.d, c, rng).loss);
  return g.forward({{"v", v}})(0, 0);
}

double contrastive_loss(const MatD& v, const std::vector<Index>& origin_ids, const LossConfig& cfg,
                        std::mt19937_64& rng) {
  if (static_cast<Index>(origin_ids.size()) != v.rows()) throw ShapeError("contrastive_loss: one origin id per row");
  Graph<double> g;
  auto in = g.input("v", v.cols());
  NodeId z = in;
  if (cfg.whiten) {
    if (origin_ids != layout_origin_ids(v.rows() / cfg.d, cfg.d)) {
      throw Error("contrastive_loss: whitening needs the standard batch layout");
    }
    z = whiten_sliced(g, z, make_sliceplan(v.rows() / cfg.d, cfg.resolved(v.cols()).slicing, rng), cfg.ridge);
  }
  if (cfg.normalize) z = g.l2_normalize_rows(z);
  auto logits = g.scale_add(g.matmul(z, z, true), std::nullopt, 1.0 / cfg.tau, 0.0);
  g.set_output(g.softmax_cross_entropy(logits, contrastive_targets(origin_ids), true));
  return g.forward({{"v", v}})(0, 0);
}

double bn_mse_loss(const MatD& v, const std::vector<Index>& origin_ids, bool normalize) {
  if (static_cast<Index>(origin_ids.size()) != v.rows()) throw ShapeError("bn_mse_loss: one origin id per row");
  Graph<double> g;
  auto in = g.input("v", v.cols());
  NodeId z = g.batch_standardize(in);
  if (normalize) z = g.l2_normalize_rows(z);
  g.set_output(pair_mse(g, z, positive_pairs(origin_ids)));
  return g.forward({{"v", v}})(0, 0);
}

template LossGraph build_loss<float>(Graph<float>&, NodeId, Index, const LossConfig&, std::mt19937_64&);
template LossGraph build_loss<double>(Graph<double>&, NodeId, Index, const LossConfig&, std::mt19937_64&);

}  // namespace whitebed
