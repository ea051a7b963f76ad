#include "doctest.h"

#include "whitebed/bench.hpp"
#include "whitebed/errors.hpp"

#include <numeric>

using namespace whitebed;

TEST_CASE("quantiles") {
  CHECK(quantile({3, 1, 2}, 0.5) == 2.0);
  CHECK(quantile({1, 2, 3, 4}, 0.5) == 2.5);
  std::vector<double> xs(11);
  std::iota(xs.begin(), xs.end(), 0.0);
  CHECK(quantile(xs, 0.9) == doctest::Approx(9.0));
  CHECK_THROWS_AS(quantile({}, 0.5), Error);
}

TEST_CASE("bench segments account for the step") {
  TrainConfig cfg;
  cfg.batch_origins = 32;
  cfg.model.encoder.input = {3, 16, 16};
  cfg.model.encoder.widths = {8, 8, 16, 16};
  cfg.model.projector = {32, 8};
  SyntheticConfig sc;
  sc.side = 16;
  sc.per_class = 16;
  const Dataset data = gen_synthetic(sc);

  const BenchReport r = bench_step(cfg, data, 2, 12);
  REQUIRE(r.segments.size() == 6);
  for (const auto& s : r.segments) {
    CHECK(s.samples.size() == 12);  // warm-up steps excluded
    CHECK(s.median_ms >= 0.0);
    CHECK(s.p90_ms >= s.median_ms);
  }
  CHECK(r.at("whitening").median_ms > 0.0);
  for (std::size_t i = 0; i < 12; ++i) {
    double parts = 0.0;
    for (std::size_t s = 0; s < 5; ++s) parts += r.segments[s].samples[i];
    const double total = r.at("total").samples[i];
    CHECK(parts <= total * 1.0 + 1e-9);
    CHECK(parts >= 0.9 * total);
  }
  const std::string csv = r.csv();
  CHECK(csv.rfind("segment,median_ms,p90_ms\naugment,", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
  CHECK_THROWS_AS(bench_step(cfg, data, 0, 5), ConfigError);
  CHECK_THROWS_AS(r.at("loss"), Error);
}
