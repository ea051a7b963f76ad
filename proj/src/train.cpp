#include "whitebed/train.hpp"

#include "whitebed/errors.hpp"
#include "whitebed/random.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

namespace whitebed {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t).count();
}

}  // namespace

void adam_step(std::map<std::string, MatD>& params, const std::map<std::string, MatD>& grads, AdamState& state,
               double lr, const AdamConfig& cfg) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw Error("adam: gradient for unknown parameter '" + name + "'");
    if (g.rows() != it->second.rows() || g.cols() != it->second.cols()) {
      throw ShapeError("adam: gradient of '" + name + "' is " + shape_str(g.rows(), g.cols()) + ", parameter is " +
                       shape_str(it->second.rows(), it->second.cols()));
    }
    if (!g.allFinite()) throw NumericError("non-finite gradient in parameter '" + name + "'");
  }
  ++state.step;
  const double t = double(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t), c2 = 1.0 - std::pow(cfg.beta2, t);
  for (const auto& [name, g] : grads) {
    MatD& p = params.at(name);
    MatD& m = state.m[name];
    MatD& v = state.v[name];
    if (m.size() == 0) m = MatD::Zero(p.rows(), p.cols());
    if (v.size() == 0) v = MatD::Zero(p.rows(), p.cols());
    MatD grad = g;
    if (cfg.decoupled) {
      p *= 1.0 - lr * cfg.weight_decay;
    } else {
      grad += cfg.weight_decay * p;
    }
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
    p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.eps);
  }
}

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
  if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0");
  if (warmup_iters < 0) throw ConfigError("train.warmup_iters must be >= 0");
  if (!(drop_factor > 0.0 && drop_factor < 1.0)) throw ConfigError("train.drop_factor must be in (0, 1)");
  for (Index d : drop_epochs)
    if (d < 0) throw ConfigError("train.drop_epochs entries must be >= 0");
  if (batch_origins < 1) throw ConfigError("train.batch_origins must be >= 1");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw ConfigError("adam betas must be in [0, 1)");
  }
  if (!(adam.eps > 0.0)) throw ConfigError("adam.eps must be > 0");
  if (adam.weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
  if (knn_every < 0) throw ConfigError("train.knn_every must be >= 0");
  if (knn_k < 1) throw ConfigError("train.knn_k must be >= 1");
  if (threads < 0) throw ConfigError("train.threads must be >= 0");
  model.validate();
  loss.validate(model.projector.out_dim);
  if (loss.kind == LossKind::wmse || (loss.kind == LossKind::contrastive && loss.whiten)) {
    const Index sub = loss.resolved(model.projector.out_dim).slicing.sub_size;
    if (batch_origins % sub != 0) {
      throw ConfigError("train.batch_origins (" + std::to_string(batch_origins) +
                        ") must be a multiple of the slicing sub_size (" + std::to_string(sub) + ")");
    }
  }
}

double lr_at(std::int64_t iteration, Index epoch, const TrainConfig& cfg) {
  double lr = cfg.lr;
  if (iteration < cfg.warmup_iters) lr *= double(iteration) / double(cfg.warmup_iters);
  for (Index offset : cfg.drop_epochs)
    if (epoch >= std::max<Index>(0, cfg.epochs - offset)) lr *= cfg.drop_factor;
  return lr;
}

std::string format_metrics_row(const MetricsRow& row) {
  auto num = [](double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", x);
    return std::string(buf);
  };
  auto opt = [&](const std::optional<double>& x) { return x ? num(*x) : std::string(); };
  std::ostringstream out;
  out << row.epoch << ',' << row.iteration << ',' << num(row.loss) << ',' << num(row.lr) << ','
      << opt(row.ms_per_iter) << ',' << opt(row.knn_acc) << ',' << opt(row.linear_acc);
  return out.str();
}

MatF make_view_batch(const Dataset& data, const std::vector<Index>& origins, Index d, std::uint64_t seed, Index epoch,
                     const AugConfig& aug, int threads) {
  if (origins.empty()) throw Error("view batch: no origins");
  const Index cols = data.images.at(std::size_t(origins.front())).size();
  const Index n = Index(origins.size());
  MatF out(n * d, cols);
  auto work = [&](Index begin, Index end) {
    for (Index i = begin; i < end; ++i) {
      const Index src = origins[std::size_t(i)];
      if (src < 0 || src >= data.size()) throw Error("view batch: origin index " + std::to_string(src) + " out of range");
      auto rng = derived_rng({seed, kViewSeedTag, std::uint64_t(epoch), std::uint64_t(src)});
      const auto views = make_views(data.images[std::size_t(src)], d, rng, aug);
      for (Index j = 0; j < d; ++j) {
        const auto& px = views[std::size_t(j)].data;
        out.row(i * d + j) = Eigen::Map<const RowVec<float>>(px.data(), Index(px.size()));
      }
    }
  };
  unsigned workers = threads > 0 ? unsigned(threads) : std::max(1u, std::thread::hardware_concurrency());
  workers = std::min<unsigned>(workers, unsigned(n));
  if (workers <= 1) {
    work(0, n);
    return out;
  }
  // Each origin has its own derived seed, so the split does not affect the result.
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        work(n * w / workers, n * (w + 1) / workers);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

Trainer::Trainer(TrainConfig cfg, const Dataset& train) : cfg_(std::move(cfg)), data_(train) {
  cfg_.validate();
  cfg_.loss = cfg_.loss.resolved(cfg_.model.projector.out_dim);
  if (data_.size() == 0) throw Error("training dataset is empty");
  if (data_.images.front().size() != cfg_.model.encoder.input.size()) {
    const auto& im = data_.images.front();
    const auto& in = cfg_.model.encoder.input;
    throw ShapeError("dataset images are " + std::to_string(im.channels) + "x" + std::to_string(im.height) + "x" +
                     std::to_string(im.width) + " but the encoder expects " + std::to_string(in.channels) + "x" +
                     std::to_string(in.height) + "x" + std::to_string(in.width));
  }
  if (steps_per_epoch() == 0) {
    throw ConfigError("dataset of " + std::to_string(data_.size()) + " images has no full batch of " +
                      std::to_string(cfg_.batch_origins) + " origins");
  }
  params_ = init_params(cfg_.model, cfg_.seed);
}

Index Trainer::steps_per_epoch() const { return data_.size() / cfg_.batch_origins; }

template <typename Scalar>
MetricsRow Trainer::step_impl(const std::vector<Index>& origins, StepTimings* timings) {
  const auto start = Clock::now();
  const Index n = Index(origins.size());
  const MatF views = make_view_batch(data_, origins, cfg_.loss.d, cfg_.seed, epoch_, cfg_.augment, cfg_.threads);
  const double augment_ms = ms_since(start);

  const auto fwd_start = Clock::now();
  Graph<Scalar> g;
  g.enable_profiling(timings != nullptr);
  ModelState<Scalar> state(params_);
  auto nodes = build_model(g, g.input("x", views.cols()), cfg_.model, params_, state, true);
  auto rng = derived_rng({cfg_.seed, kSliceSeedTag, std::uint64_t(iteration_)});
  auto lg = build_loss(g, nodes.v, n, cfg_.loss, rng);
  g.set_output(lg.loss);
  const double loss = double(g.forward({{"x", views.template cast<Scalar>()}})(0, 0));
  if (!std::isfinite(loss)) throw NumericError("non-finite loss");
  const double forward_ms = ms_since(fwd_start);

  const auto bwd_start = Clock::now();
  auto grads = g.backward();
  const double backward_ms = ms_since(bwd_start);

  const auto opt_start = Clock::now();
  std::map<std::string, MatD> grads64;
  for (auto& [name, grad] : grads) grads64.emplace(name, grad.template cast<double>());
  const double lr = lr_at(iteration_, epoch_, cfg_);
  adam_step(params_.values, grads64, adam_, lr, cfg_.adam);
  state.commit(params_);
  const double optimizer_ms = ms_since(opt_start);

  MetricsRow row;
  row.epoch = epoch_;
  row.iteration = iteration_;
  row.loss = loss;
  row.lr = lr;
  const double total = ms_since(start);
  if (!cfg_.deterministic) row.ms_per_iter = total;
  if (timings) {
    timings->augment_ms = augment_ms;
    timings->forward_ms = forward_ms;
    timings->backward_ms = backward_ms;
    timings->whitening_forward_ms = g.timings().forward(OpKind::whitening);
    timings->whitening_backward_ms = g.timings().backward(OpKind::whitening);
    timings->optimizer_ms = optimizer_ms;
    timings->total_ms = total;
  }
  ++iteration_;
  return row;
}

MetricsRow Trainer::train_step(const std::vector<Index>& origins, StepTimings* timings) {
  const std::string where = "epoch " + std::to_string(epoch_) + ", iteration " + std::to_string(iteration_) + ": ";
  try {
    return cfg_.precision == Precision::f32 ? step_impl<float>(origins, timings) : step_impl<double>(origins, timings);
  } catch (const NotPositiveDefinite& e) {
    throw NumericError(where + e.what());
  } catch (const SingularMatrix& e) {
    throw NumericError(where + e.what());
  } catch (const NumericError& e) {
    throw NumericError(where + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(where + e.what());
  } catch (const ShapeError& e) {
    throw ShapeError(where + e.what());
  } catch (const Error& e) {
    throw Error(where + e.what());
  }
}

std::vector<MetricsRow> Trainer::run_epoch() {
  const EpochSampler sampler(data_.size(), cfg_.batch_origins, cfg_.seed, std::uint64_t(epoch_));
  std::vector<MetricsRow> rows;
  for (Index b = 0; b < sampler.batch_count(); ++b) rows.push_back(train_step(sampler.batch(b)));
  ++epoch_;
  return rows;
}

Checkpoint Trainer::checkpoint(const nlohmann::json& meta) const {
  Checkpoint ck;
  pack_params(params_, ck);
  for (const auto& name : params_.order) {
    auto m = adam_.m.find(name);
    auto v = adam_.v.find(name);
    if (m == adam_.m.end() || v == adam_.v.end()) continue;
    ck.tensors.push_back({"adam.m/" + name, m->second});
    ck.tensors.push_back({"adam.v/" + name, v->second});
  }
  ck.meta = meta;
  ck.meta["epoch"] = epoch_;
  ck.meta["iteration"] = iteration_;
  ck.meta["adam_step"] = adam_.step;
  ck.meta["model"] = to_json(cfg_.model);
  return ck;
}

void Trainer::restore(const Checkpoint& ck) {
  for (const char* key : {"epoch", "iteration", "adam_step"})
    if (!ck.meta.contains(key)) throw IoError(std::string("checkpoint meta lacks '") + key + "'; not a training checkpoint");
  unpack_params(ck, params_);
  AdamState adam;
  adam.step = ck.meta.at("adam_step").get<std::int64_t>();
  if (adam.step > 0) {
    for (const auto& name : params_.order) {
      const MatD* m = ck.find("adam.m/" + name);
      const MatD* v = ck.find("adam.v/" + name);
      if (!m || !v) throw IoError("checkpoint lacks optimizer moments for '" + name + "'");
      adam.m[name] = *m;
      adam.v[name] = *v;
    }
  }
  adam_ = std::move(adam);
  epoch_ = ck.meta.at("epoch").get<Index>();
  iteration_ = ck.meta.at("iteration").get<std::int64_t>();
}

namespace {

void save_atomic(const std::filesystem::path& file, const Checkpoint& ck) {
  auto tmp = file;
  tmp += ".tmp";
  save_checkpoint(tmp, ck);
  std::filesystem::rename(tmp, file);
}

/// Keeps the header and rows up to `last_iteration` of an existing metrics file.
std::string truncated_metrics(const std::filesystem::path& file, std::int64_t last_iteration) {
  std::ifstream in(file);
  std::string line, out = std::string(kMetricsHeader) + "\n";
  if (!in) return out;
  std::getline(in, line);
  if (line != kMetricsHeader) throw IoError(file.string() + ": unexpected metrics header");
  while (std::getline(in, line)) {
    const auto a = line.find(',');
    if (a == std::string::npos) continue;
    const auto b = line.find(',', a + 1);
    if (std::stoll(line.substr(a + 1, b - a - 1)) < last_iteration) out += line + "\n";
  }
  return out;
}

}  // namespace

FitResult fit(const TrainConfig& cfg, const Dataset& train, const FitOptions& options) {
  if (bool(options.knn_memory) != bool(options.knn_query)) {
    throw ConfigError("periodic k-NN needs both a memory set and a query set");
  }
  namespace fs = std::filesystem;
  fs::create_directories(options.out_dir);
  FitResult result{options.out_dir / "final.ckpt", options.out_dir / "metrics.csv", {}};

  Trainer trainer(cfg, train);
  nlohmann::json meta = {{"config", options.config_json}};
  if (options.resume) {
    trainer.restore(load_checkpoint(*options.resume));
    const std::string kept = truncated_metrics(result.metrics, trainer.iteration());
    std::ofstream(result.metrics, std::ios::trunc) << kept;
  } else {
    save_atomic(options.out_dir / "init.ckpt", trainer.checkpoint(meta));
    std::ofstream(result.metrics, std::ios::trunc) << kMetricsHeader << "\n";
  }

  while (trainer.epoch() < cfg.epochs) {
    auto rows = trainer.run_epoch();
    const Index done = trainer.epoch();
    if (options.knn_memory && cfg.knn_every > 0 && done % cfg.knn_every == 0 && !rows.empty()) {
      const MatD mem = extract_features(cfg.model, trainer.params(), *options.knn_memory, cfg.precision);
      const MatD qry = extract_features(cfg.model, trainer.params(), *options.knn_query, cfg.precision);
      const auto pred = knn_predict(mem, options.knn_memory->labels, qry, cfg.knn_k, options.knn_memory->class_count);
      rows.back().knn_acc = accuracy(pred, options.knn_query->labels);
    }
    {
      std::ofstream out(result.metrics, std::ios::app);
      for (const auto& r : rows) out << format_metrics_row(r) << "\n";
      if (!out) throw IoError("cannot append to " + result.metrics.string());
    }
    if (trainer.epoch() < cfg.epochs) save_atomic(result.checkpoint, trainer.checkpoint(meta));
    for (const auto& r : rows) {
      if (options.on_row) options.on_row(r);
      result.rows.push_back(r);
    }
  }
  save_atomic(result.checkpoint, trainer.checkpoint(meta));
  return result;
}

}  // namespace whitebed
