#pragma once

// Per-step wall-clock breakdown of a training step, with the whitening work
// separated from the rest of the forward and backward passes.

#include "whitebed/data.hpp"
#include "whitebed/train.hpp"

#include <string>
#include <vector>

namespace whitebed {

struct SegmentStats {
  std::string name;
  double median_ms = 0.0;
  double p90_ms = 0.0;
  std::vector<double> samples;
};

struct BenchReport {
  /// augment, forward, whitening, backward, optimizer, total. forward and
  /// backward exclude the whitening ops, which are reported together.
  std::vector<SegmentStats> segments;

  const SegmentStats& at(const std::string& name) const;
  /// "segment,median_ms,p90_ms" followed by one line per segment.
  std::string csv() const;
};

/// Linear-interpolation quantile (q in [0, 1]) of unsorted samples.
double quantile(std::vector<double> samples, double q);

/// Runs warmup_steps unmeasured steps, then measured_steps timed ones, single-threaded.
/// Batches cycle through seeded epochs of `data`.
BenchReport bench_step(TrainConfig cfg, const Dataset& data, Index warmup_steps, Index measured_steps);

}  // namespace whitebed
