#include "whitebed/bench.hpp"

#include "whitebed/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace whitebed {

const SegmentStats& BenchReport::at(const std::string& name) const {
  for (const auto& s : segments)
    if (s.name == name) return s;
  throw Error("bench: no segment '" + name + "'");
}

std::string BenchReport::csv() const {
  std::string out = "segment,median_ms,p90_ms\n";
  char buf[128];
  for (const auto& s : segments) {
    std::snprintf(buf, sizeof buf, "%s,%.4f,%.4f\n", s.name.c_str(), s.median_ms, s.p90_ms);
    out += buf;
  }
  return out;
}

double quantile(std::vector<double> samples, double q) {
  if (samples.empty()) throw Error("quantile of an empty sample");
  std::sort(samples.begin(), samples.end());
  const double pos = q * double(samples.size() - 1);
  const auto lo = std::size_t(std::floor(pos));
  const auto hi = std::min(lo + 1, samples.size() - 1);
  return samples[lo] + (pos - double(lo)) * (samples[hi] - samples[lo]);
}

BenchReport bench_step(TrainConfig cfg, const Dataset& data, Index warmup_steps, Index measured_steps) {
  if (measured_steps < 10) throw ConfigError("bench: measured_steps must be at least 10");
  if (warmup_steps < 0) throw ConfigError("bench: warmup_steps must be >= 0");
  cfg.threads = 1;
  cfg.deterministic = false;
  // The schedule does not matter for timing; keep the rate constant.
  cfg.warmup_iters = 0;
  cfg.drop_epochs.clear();
  Trainer trainer(cfg, data);

  const char* names[] = {"augment", "forward", "whitening", "backward", "optimizer", "total"};
  std::vector<std::vector<double>> samples(6);
  Index epoch = 0, batch = 0;
  EpochSampler sampler(data.size(), cfg.batch_origins, cfg.seed, 0);
  for (Index step = 0; step < warmup_steps + measured_steps; ++step) {
    if (batch == sampler.batch_count()) {
      sampler = EpochSampler(data.size(), cfg.batch_origins, cfg.seed, std::uint64_t(++epoch));
      batch = 0;
    }
    StepTimings t;
    trainer.train_step(sampler.batch(batch++), &t);
    if (step < warmup_steps) continue;
    const double values[] = {t.augment_ms,
                             t.forward_ms - t.whitening_forward_ms,
                             t.whitening_forward_ms + t.whitening_backward_ms,
                             t.backward_ms - t.whitening_backward_ms,
                             t.optimizer_ms,
                             t.total_ms};
    for (std::size_t i = 0; i < 6; ++i) samples[i].push_back(values[i]);
  }
  BenchReport report;
  for (std::size_t i = 0; i < 6; ++i) {
    report.segments.push_back({names[i], quantile(samples[i], 0.5), quantile(samples[i], 0.9), samples[i]});
  }
  return report;
}

}  // namespace whitebed
