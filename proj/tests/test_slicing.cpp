#include "doctest.h"
#include "support.hpp"

#include "whitebed/losses.hpp"
#include "whitebed/slicing.hpp"

#include <set>

using namespace whitebed;
using whitebed::test::max_abs;
using whitebed::test::random_matrix;

namespace {

SliceplanConfig plan_cfg(Index d, Index sub_size, Index iterations = 1) {
  SliceplanConfig c;
  c.d = d;
  c.sub_size = sub_size;
  c.iterations = iterations;
  return c;
}

MatD gather(const MatD& v, const std::vector<Index>& rows) {
  MatD out(static_cast<Index>(rows.size()), v.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(Index(r)) = v.row(rows[r]);
  return out;
}

}  // namespace

TEST_CASE("sliceplan layout: N=4, d=2, sub_size=2") {
  std::mt19937_64 rng(3);
  const Sliceplan plan = make_sliceplan(4, plan_cfg(2, 2), rng);
  CHECK(plan.sub_batch_count() == 4);
  CHECK(plan.sub_batches_per_partition() == 2);
  for (Index i = 0; i < 4; ++i) {
    const auto& a = plan.assignment(i * 2 + 0);
    const auto& b = plan.assignment(i * 2 + 1);
    CHECK(a.partition == 0);
    CHECK(b.partition == 1);
    CHECK(a.sub_batch == b.sub_batch);
  }
}

TEST_CASE("sliceplan invariants over many shapes") {
  std::mt19937_64 rng(4);
  for (Index d : {2, 3, 4}) {
    for (Index sub : {1, 2, 4, 8}) {
      const Index n = 16;
      const Sliceplan plan = make_sliceplan(n, plan_cfg(d, sub), rng);
      std::multiset<Index> covered;
      for (Index p = 0; p < d; ++p) {
        std::set<Index> origins_in_partition;
        for (Index s = 0; s < plan.sub_batches_per_partition(); ++s) {
          const auto& rows = plan.members(p, s);
          CHECK(Index(rows.size()) == sub);
          for (Index r : rows) {
            covered.insert(r);
            CHECK(r % d == p);
            origins_in_partition.insert(r / d);
            CHECK(plan.assignment(r).partition == p);
            CHECK(plan.assignment(r).sub_batch == s);
          }
        }
        CHECK(Index(origins_in_partition.size()) == n);
      }
      CHECK(Index(covered.size()) == n * d);
      CHECK(Index(std::set<Index>(covered.begin(), covered.end()).size()) == n * d);
      for (Index i = 0; i < n; ++i) {
        for (Index j = 1; j < d; ++j) CHECK(plan.assignment(i * d + j).sub_batch == plan.assignment(i * d).sub_batch);
      }
    }
  }
}

TEST_CASE("sliceplan is deterministic per seed and errors on indivisible N") {
  std::mt19937_64 a(11), b(11), c(12);
  const auto pa = make_sliceplan(32, plan_cfg(2, 8), a);
  const auto pb = make_sliceplan(32, plan_cfg(2, 8), b);
  const auto pc = make_sliceplan(32, plan_cfg(2, 8), c);
  CHECK(pa.permutation() == pb.permutation());
  CHECK(pa.permutation() != pc.permutation());
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(make_sliceplan(10, plan_cfg(2, 4), rng), ConfigError);
  CHECK_THROWS_AS(make_sliceplan(8, plan_cfg(1, 4), rng), ConfigError);
}

TEST_CASE("slicing config validation") {
  SliceplanConfig c;
  CHECK(c.resolved_sub_size(16) == 32);
  CHECK_NOTHROW(c.validate(16));
  c.sub_size = 16;
  CHECK_THROWS_AS(c.validate(16), ConfigError);
  c.sub_size = 17;
  CHECK_NOTHROW(c.validate(16));
  c.iterations = 0;
  CHECK_THROWS_AS(c.validate(16), ConfigError);
}

TEST_CASE("single sub-batch per partition matches whiten_batch on each partition") {
  std::mt19937_64 rng(5);
  const Index n = 12, d = 2, k = 3;
  MatD v = random_matrix(n * d, k, rng);
  for (int rep = 0; rep < 3; ++rep) {
    const Sliceplan plan = make_sliceplan(n, plan_cfg(d, n), rng);
    MatD z = whiten_sliced(v, plan, Ridge::standard());
    for (Index p = 0; p < d; ++p) {
      std::vector<Index> rows;
      for (Index i = 0; i < n; ++i) rows.push_back(i * d + p);
      MatD expect = whiten_batch(gather(v, rows), Ridge::standard()).z;
      CHECK(max_abs(gather(z, rows) - expect) <= 1e-12);
    }
  }
}

TEST_CASE("one sub-batch covering every row is plain whitening") {
  std::mt19937_64 rng(6);
  MatD v = random_matrix(10, 3, rng);
  std::vector<Index> ident(10);
  for (Index i = 0; i < 10; ++i) ident[std::size_t(i)] = i;
  const Sliceplan plan(10, 1, 10, ident);
  CHECK(max_abs(whiten_sliced(v, plan, Ridge::standard()) - whiten_batch(v, Ridge::standard()).z) <= 1e-12);
}

TEST_CASE("N=2, d=2, sub_size=2: permutation does not change the output") {
  std::mt19937_64 rng(7);
  MatD v = random_matrix(4, 1, rng);
  const Sliceplan a(2, 2, 2, {0, 1});
  const Sliceplan b(2, 2, 2, {1, 0});
  CHECK(a.sub_batch_count() == 2);
  CHECK(max_abs(whiten_sliced(v, a, Ridge::none()) - whiten_sliced(v, b, Ridge::none())) <= 1e-12);
}

TEST_CASE("sub-batches with identical contents whiten identically") {
  std::mt19937_64 rng(8);
  const Index k = 3, sub = 6;
  MatD block = random_matrix(sub, k, rng);
  // d = 2, N = 12, identity permutation: partition 0 sub-batch 0 holds origins 0..5, sub-batch 1 origins 6..11.
  MatD v(24, k);
  for (Index i = 0; i < 12; ++i) {
    v.row(i * 2) = block.row(i % sub);
    v.row(i * 2 + 1) = block.row(i % sub) * 2.0;
  }
  std::vector<Index> ident(12);
  for (Index i = 0; i < 12; ++i) ident[std::size_t(i)] = i;
  const Sliceplan plan(12, 2, sub, ident);
  MatD z = whiten_sliced(v, plan, Ridge::standard());
  for (Index p = 0; p < 2; ++p) {
    CHECK(max_abs(gather(z, plan.members(p, 0)) - gather(z, plan.members(p, 1))) <= 1e-12);
  }
}

TEST_CASE("every sub-batch comes out white") {
  std::mt19937_64 rng(9);
  const Index n = 64, d = 3, k = 5;
  MatD v = random_matrix(n * d, k, rng) * 3.0;
  v.col(1) += 0.5 * v.col(0);
  const Sliceplan plan = make_sliceplan(n, plan_cfg(d, 16), rng);
  MatD z = whiten_sliced(v, plan, Ridge::none());
  for (Index p = 0; p < d; ++p) {
    for (Index s = 0; s < plan.sub_batches_per_partition(); ++s) {
      MatD part = gather(z, plan.members(p, s));
      RowVec<double> mu = part.colwise().mean();
      MatD c = part.rowwise() - mu;
      MatD cov = c.transpose() * c / double(part.rows() - 1);
      CHECK(mu.cwiseAbs().maxCoeff() <= 1e-10);
      CHECK(max_abs(cov - MatD::Identity(k, k)) <= 1e-8);
    }
  }
}

TEST_CASE("whitening errors name the sub-batch") {
  MatD v = MatD::Zero(8, 2);
  for (Index r = 0; r < 8; ++r) v(r, 0) = double(r);
  std::vector<Index> ident = {0, 1, 2, 3};
  const Sliceplan plan(4, 2, 4, ident);
  try {
    (void)whiten_sliced(v, plan, Ridge::none());
    FAIL("expected NotPositiveDefinite");
  } catch (const NotPositiveDefinite& e) {
    CHECK(std::string(e.what()).find("sub-batch (partition 0, index 0)") != std::string::npos);
    CHECK(e.pivot() == 1);
  }

  Graph<double> g;
  auto in = g.input("v", 2);
  g.sum_all(whiten_sliced(g, in, plan, Ridge::none()));
  try {
    g.forward({{"v", v}});
    FAIL("expected NotPositiveDefinite");
  } catch (const NotPositiveDefinite& e) {
    CHECK(std::string(e.what()).find("sub-batch (partition 0, index 0)") != std::string::npos);
  }
}

TEST_CASE("graph slicing agrees with eager slicing, forward and gradient") {
  std::mt19937_64 rng(10);
  const Index n = 8, d = 2, k = 2;
  MatD v = random_matrix(n * d, k, rng);
  const Sliceplan plan = make_sliceplan(n, plan_cfg(d, 4), rng);
  Graph<double> g;
  auto p = g.parameter("v", v);
  auto z = whiten_sliced(g, p, plan, Ridge::standard());
  g.mse_mean(z, g.input("t", k));
  const MatD target = random_matrix(n * d, k, rng);
  g.forward({{"t", target}});
  CHECK(max_abs(g.value(z) - whiten_sliced(v, plan, Ridge::standard())) <= 1e-12);
  CHECK(grad_check(g, {{"t", target}}, 1e-4) <= 1e-4);
}

TEST_CASE("more slicing iterations reduce loss variance on a fixed batch") {
  std::mt19937_64 data_rng(12);
  const Index n = 64, d = 2, k = 4;
  MatD v = random_matrix(n * d, k, data_rng);
  // Positive views share signal so the loss is far from its random level.
  for (Index i = 0; i < n; ++i) v.row(i * d + 1) = v.row(i * d) + 0.7 * random_matrix(1, k, data_rng);

  auto variance_over_seeds = [&](Index iterations) {
    LossConfig cfg;
    cfg.slicing = plan_cfg(d, 8, iterations);
    std::vector<double> losses;
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
      std::mt19937_64 rng(1000 + seed);
      losses.push_back(wmse_loss(v, cfg, rng));
    }
    double mean = 0.0;
    for (double l : losses) mean += l;
    mean /= double(losses.size());
    double var = 0.0;
    for (double l : losses) var += (l - mean) * (l - mean);
    return var / double(losses.size() - 1);
  };
  const double v1 = variance_over_seeds(1);
  const double v4 = variance_over_seeds(4);
  MESSAGE("variance iterations=1: " << v1 << ", iterations=4: " << v4);
  CHECK(v4 < v1);
}
