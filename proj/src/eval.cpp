#include "whitebed/eval.hpp"

#include "whitebed/errors.hpp"
#include "whitebed/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace whitebed {

const char* precision_name(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Precision parse_precision(const std::string& name) {
  if (name == "f32") return Precision::f32;
  if (name == "f64") return Precision::f64;
  throw ConfigError("unknown precision '" + name + "' (valid: f32, f64)");
}

namespace {

template <typename Scalar>
MatD extract_impl(const ModelConfig& cfg, const ParameterSet& params, const Dataset& data, Index chunk, bool projector) {
  const Index n = data.size();
  MatD out;
  for (Index start = 0; start < n; start += chunk) {
    const Index rows = std::min(chunk, n - start);
    std::vector<Index> idx(static_cast<std::size_t>(rows));
    std::iota(idx.begin(), idx.end(), start);
    Graph<Scalar> g;
    ModelState<Scalar> state(params);
    auto in = g.input("x", cfg.encoder.input.size());
    auto nodes = build_model(g, in, cfg, params, state, false, projector);
    g.set_output(projector ? nodes.v : nodes.h);
    const auto& y = g.forward({{"x", data.as_matrix(idx).template cast<Scalar>()}});
    if (out.size() == 0) out.resize(n, y.cols());
    out.middleRows(start, rows) = y.template cast<double>();
  }
  return out;
}

}  // namespace

MatD extract_features(const ModelConfig& cfg, const ParameterSet& params, const Dataset& data, Precision precision,
                      Index chunk, bool projector) {
  if (data.size() == 0) throw Error("extract_features: empty dataset");
  if (chunk < 1) throw ConfigError("extract_features: chunk must be positive");
  return precision == Precision::f32 ? extract_impl<float>(cfg, params, data, chunk, projector)
                                     : extract_impl<double>(cfg, params, data, chunk, projector);
}

std::vector<int> knn_predict(const MatD& train, const std::vector<int>& train_labels, const MatD& test, Index k,
                             int class_count) {
  if (k < 1) throw ConfigError("knn: k must be at least 1");
  if (train.rows() < k) {
    throw Error("knn: " + std::to_string(train.rows()) + " train points, fewer than k = " + std::to_string(k));
  }
  if (Index(train_labels.size()) != train.rows()) throw ShapeError("knn: one label per train row required");
  if (train.cols() != test.cols()) throw ShapeError("knn: train and test feature widths differ");
  for (int l : train_labels)
    if (l < 0 || l >= class_count) throw Error("knn: train label " + std::to_string(l) + " outside class range");

  auto normalized = [](const MatD& m) {
    MatD out = m;
    for (Index r = 0; r < m.rows(); ++r) {
      const double norm = m.row(r).norm();
      if (norm > 0.0) out.row(r) /= norm;
    }
    return out;
  };
  const MatD a = normalized(train), b = normalized(test);
  // One dot product per pair rather than a blocked GEMM: identical train rows
  // must produce bit-identical similarities so that ties resolve by index.
  MatD sim(test.rows(), train.rows());
  for (Index t = 0; t < test.rows(); ++t)
    for (Index i = 0; i < train.rows(); ++i) sim(t, i) = a.row(i).dot(b.row(t));

  std::vector<int> pred(static_cast<std::size_t>(test.rows()));
  std::vector<Index> order(static_cast<std::size_t>(train.rows()));
  for (Index t = 0; t < test.rows(); ++t) {
    std::iota(order.begin(), order.end(), Index{0});
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](Index x, Index y) {
      const double sx = sim(t, x), sy = sim(t, y);
      return sx > sy || (sx == sy && x < y);
    });
    std::vector<int> votes(static_cast<std::size_t>(class_count), 0);
    std::vector<double> mass(static_cast<std::size_t>(class_count), 0.0);
    for (Index i = 0; i < k; ++i) {
      const int c = train_labels[std::size_t(order[std::size_t(i)])];
      ++votes[std::size_t(c)];
      mass[std::size_t(c)] += sim(t, order[std::size_t(i)]);
    }
    int best = 0;
    for (int c = 1; c < class_count; ++c) {
      const auto cu = std::size_t(c), bu = std::size_t(best);
      if (votes[cu] > votes[bu] || (votes[cu] == votes[bu] && mass[cu] > mass[bu])) best = c;
    }
    pred[std::size_t(t)] = best;
  }
  return pred;
}

double accuracy(const std::vector<int>& predicted, const std::vector<int>& labels) {
  if (predicted.size() != labels.size() || labels.empty()) throw ShapeError("accuracy: size mismatch or empty");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i];
  return double(hit) / double(labels.size());
}

void ProbeConfig::validate() const {
  if (epochs < 1) throw ConfigError("probe.epochs must be at least 1");
  if (!(lr_start > 0.0) || !(lr_end > 0.0)) throw ConfigError("probe learning rates must be positive");
  if (lr_end > lr_start) throw ConfigError("probe.lr_end must not exceed probe.lr_start");
  if (weight_decay < 0.0) throw ConfigError("probe.weight_decay must be >= 0");
  if (batch_size < 1) throw ConfigError("probe.batch_size must be positive");
}

double ProbeConfig::lr_at(Index epoch) const {
  if (epochs == 1) return lr_start;
  const double t = double(epoch) / double(epochs - 1);
  return lr_start * std::pow(lr_end / lr_start, t);
}

std::vector<int> probe_predict(const ProbeResult& probe, const MatD& features) {
  const MatD logits = (features * probe.weight).rowwise() + probe.bias.row(0);
  std::vector<int> pred(static_cast<std::size_t>(features.rows()));
  for (Index r = 0; r < logits.rows(); ++r) {
    Index arg = 0;
    logits.row(r).maxCoeff(&arg);
    pred[std::size_t(r)] = int(arg);
  }
  return pred;
}

ProbeResult fit_linear_probe(const MatD& train, const std::vector<int>& train_labels, const MatD& test,
                             const std::vector<int>& test_labels, int class_count, const ProbeConfig& cfg) {
  cfg.validate();
  if (Index(train_labels.size()) != train.rows() || Index(test_labels.size()) != test.rows()) {
    throw ShapeError("probe: one label per feature row required");
  }
  if (train.cols() != test.cols()) throw ShapeError("probe: train and test feature widths differ");
  for (const auto* labels : {&train_labels, &test_labels})
    for (int l : *labels)
      if (l < 0 || l >= class_count) {
        throw Error("probe: label " + std::to_string(l) + " does not fit " + std::to_string(class_count) + " classes");
      }

  const Index dim = train.cols();
  MatD w = MatD::Zero(dim, class_count), b = MatD::Zero(1, class_count);
  MatD mw = w, vw = w, mb = b, vb = b;
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::int64_t t = 0;

  std::vector<Index> order(static_cast<std::size_t>(train.rows()));
  std::iota(order.begin(), order.end(), Index{0});
  for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto rng = derived_rng({cfg.seed, 0x70726f6265ULL, std::uint64_t(epoch)});
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = cfg.lr_at(epoch);
    for (Index start = 0; start < train.rows(); start += cfg.batch_size) {
      const Index rows = std::min(cfg.batch_size, train.rows() - start);
      MatD x(rows, dim);
      std::vector<Index> targets(static_cast<std::size_t>(rows));
      for (Index r = 0; r < rows; ++r) {
        const Index src = order[std::size_t(start + r)];
        x.row(r) = train.row(src);
        targets[std::size_t(r)] = train_labels[std::size_t(src)];
      }
      Graph<double> g;
      auto pw = g.parameter("w", w);
      auto pb = g.parameter("b", b);
      g.softmax_cross_entropy(g.add_bias(g.matmul(g.input("x", dim), pw), pb), targets);
      g.forward({{"x", x}});
      auto grads = g.backward();
      ++t;
      const double c1 = 1.0 - std::pow(beta1, double(t)), c2 = 1.0 - std::pow(beta2, double(t));
      auto update = [&](MatD& p, const MatD& grad, MatD& m, MatD& v) {
        const MatD gr = grad + cfg.weight_decay * p;
        m = beta1 * m + (1.0 - beta1) * gr;
        v = beta2 * v + (1.0 - beta2) * gr.cwiseProduct(gr);
        p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
      };
      update(w, grads.at("w"), mw, vw);
      update(b, grads.at("b"), mb, vb);
    }
  }
  ProbeResult res{w, b, 0.0, 0.0};
  res.train_accuracy = accuracy(probe_predict(res, train), train_labels);
  res.test_accuracy = accuracy(probe_predict(res, test), test_labels);
  return res;
}

EmbeddingStats embedding_stats(const MatD& f) {
  if (f.rows() < 2) throw Error("embedding_stats: need at least 2 rows");
  const Index k = f.cols();
  const RowVec<double> mu = f.colwise().mean();
  const MatD c = f.rowwise() - mu;
  const MatD cov = c.transpose() * c / double(f.rows() - 1);
  EmbeddingStats s;
  s.variance = cov.diagonal().transpose();
  if (k < 2) return s;
  double total = 0.0;
  for (Index a = 0; a < k; ++a)
    for (Index b = 0; b < k; ++b) {
      if (a == b) continue;
      const double denom = std::sqrt(cov(a, a) * cov(b, b));
      total += denom > 0.0 ? std::min(1.0, std::abs(cov(a, b)) / denom) : 1.0;
    }
  s.mean_abs_correlation = total / double(k * (k - 1));
  return s;
}

std::string config_digest(const nlohmann::json& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(config.dump())));
  return buf;
}

nlohmann::json result_json(const std::string& protocol, const std::string& dataset, std::uint64_t seed, double accuracy,
                           const nlohmann::json& config) {
  return {{"protocol", protocol},
          {"dataset", dataset},
          {"seed", seed},
          {"accuracy", accuracy},
          {"config_digest", config_digest(config)}};
}

}  // namespace whitebed
