#include "doctest.h"
#include "support.hpp"

#include "whitebed/losses.hpp"

#include <Eigen/Cholesky>

#include <cmath>

using namespace whitebed;
using whitebed::test::max_abs;
using whitebed::test::random_matrix;

namespace {

RowVec<double> rv(std::initializer_list<double> xs) {
  RowVec<double> r(static_cast<Index>(xs.size()));
  Index i = 0;
  for (double x : xs) r(i++) = x;
  return r;
}

// Whitening written directly against Eigen's LLT, unbiased covariance, no ridge.
MatD oracle_whiten(const MatD& v) {
  Eigen::MatrixXd x = v;
  Eigen::RowVectorXd mu = x.colwise().mean();
  Eigen::MatrixXd c = x.rowwise() - mu;
  Eigen::MatrixXd cov = c.transpose() * c / double(x.rows() - 1);
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  Eigen::MatrixXd l = llt.matrixL();
  // z^T = L^{-1} c^T
  Eigen::MatrixXd zt = l.triangularView<Eigen::Lower>().solve(c.transpose());
  return zt.transpose();
}

double oracle_cos_mse(const MatD& z, Index n, Index d) {
  double total = 0.0;
  Index count = 0;
  for (Index i = 0; i < n; ++i)
    for (Index a = 0; a < d; ++a)
      for (Index b = a + 1; b < d; ++b) {
        Eigen::RowVectorXd x = z.row(i * d + a), y = z.row(i * d + b);
        total += 2.0 - 2.0 * x.dot(y) / (x.norm() * y.norm());
        ++count;
      }
  return total / double(count);
}

double oracle_contrastive(const MatD& z0, const std::vector<Index>& ids, double tau, bool normalize) {
  MatD z = z0;
  if (normalize) z = z0.rowwise().normalized();
  const Index k = z.rows();
  double total = 0.0;
  Index anchors = 0;
  for (Index i = 0; i < k; ++i) {
    Index pos = -1;
    for (Index step = 1; step < k; ++step) {
      const Index j = (i + step) % k;
      if (ids[std::size_t(j)] == ids[std::size_t(i)]) {
        pos = j;
        break;
      }
    }
    double mx = -1e300;
    for (Index j = 0; j < k; ++j)
      if (j != i) mx = std::max(mx, z.row(i).dot(z.row(j)) / tau);
    double s = 0.0;
    for (Index j = 0; j < k; ++j)
      if (j != i) s += std::exp(z.row(i).dot(z.row(j)) / tau - mx);
    total += -(z.row(i).dot(z.row(pos)) / tau - mx - std::log(s));
    ++anchors;
  }
  return total / double(anchors);
}

LossConfig config(LossKind kind) {
  LossConfig c;
  c.kind = kind;
  return c;
}

double eval_loss(const MatD& v, Index origins, const LossConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Graph<double> g;
  auto in = g.input("v", v.cols());
  g.set_output(build_loss(g, in, origins, cfg.resolved(v.cols()), rng).loss);
  return g.forward({{"v", v}})(0, 0);
}

}  // namespace

TEST_CASE("pair_dist examples") {
  CHECK(pair_dist(rv({3, 4}), rv({3, 4}), true) == doctest::Approx(0.0));
  CHECK(pair_dist(rv({1, 0}), rv({-1, 0}), true) == doctest::Approx(4.0));
  CHECK(pair_dist(rv({1, 0}), rv({0, 1}), true) == doctest::Approx(2.0));
  CHECK(pair_dist(rv({1, 0}), rv({0, 2}), false) == doctest::Approx(5.0));
  CHECK_THROWS_AS(pair_dist(rv({0, 0}), rv({0, 1}), true), Error);
  std::mt19937_64 rng(1);
  for (int t = 0; t < 50; ++t) {
    RowVec<double> a = random_matrix(1, 5, rng), b = random_matrix(1, 5, rng);
    const double dist = pair_dist(a, b, true);
    CHECK(dist >= 0.0);
    CHECK(dist <= 4.0);
    CHECK(dist == doctest::Approx(2.0 - 2.0 * a.dot(b) / (a.norm() * b.norm())).epsilon(1e-12));
  }
}

TEST_CASE("positive pair count is N*d*(d-1)/2") {
  for (Index n = 1; n <= 16; ++n)
    for (Index d : {2, 3, 4}) CHECK(Index(positive_pairs(layout_origin_ids(n, d)).size()) == n * d * (d - 1) / 2);
  CHECK(positive_pairs(layout_origin_ids(8, 4)).size() == 48);
  CHECK(positive_pairs(layout_origin_ids(1, 2)).size() == 1);
}

TEST_CASE("wmse matches a scratch recomputation, N=16, d=2, k=2") {
  std::mt19937_64 data(21);
  const Index n = 16, d = 2, k = 2;
  MatD v = random_matrix(n * d, k, data);
  for (Index i = 0; i < n; ++i) v.row(i * d + 1) = v.row(i * d) + 0.5 * random_matrix(1, k, data);

  for (Index sub : {16, 8, 4}) {
    for (Index iterations : {1, 3}) {
      LossConfig cfg = config(LossKind::wmse);
      cfg.ridge = Ridge::none();
      cfg.slicing.sub_size = sub;
      cfg.slicing.iterations = iterations;
      const std::uint64_t seed = 77;
      std::mt19937_64 rng(seed);
      const double got = wmse_loss(v, cfg, rng);

      // Scratch: same permutation draws, whitening per sub-batch, normalized pair MSE.
      std::mt19937_64 orng(seed);
      double expect = 0.0;
      for (Index it = 0; it < iterations; ++it) {
        std::vector<Index> perm(static_cast<std::size_t>(n));
        for (Index i = 0; i < n; ++i) perm[std::size_t(i)] = i;
        std::shuffle(perm.begin(), perm.end(), orng);
        MatD z(n * d, k);
        for (Index p = 0; p < d; ++p) {
          for (Index start = 0; start < n; start += sub) {
            MatD part(sub, k);
            for (Index r = 0; r < sub; ++r) part.row(r) = v.row(perm[std::size_t(start + r)] * d + p);
            MatD zp = oracle_whiten(part);
            for (Index r = 0; r < sub; ++r) z.row(perm[std::size_t(start + r)] * d + p) = zp.row(r);
          }
        }
        expect += oracle_cos_mse(z, n, d) / double(iterations);
      }
      CHECK(std::abs(got - expect) <= 1e-10);
    }
  }
}

TEST_CASE("wmse is bounded and relabel invariant") {
  std::mt19937_64 rng(22);
  const Index n = 16, d = 3, k = 3;
  for (int t = 0; t < 10; ++t) {
    MatD v = random_matrix(n * d, k, rng);
    LossConfig cfg = config(LossKind::wmse);
    cfg.d = d;
    cfg.slicing.sub_size = 8;
    std::mt19937_64 lr(t);
    const double l = wmse_loss(v, cfg, lr);
    CHECK(l >= 0.0);
    CHECK(l <= 4.0);
  }

  // Move origin i to slot sigma(i) and relabel the plan with the same sigma.
  MatD v = random_matrix(n * 2, 2, rng);
  std::vector<Index> sigma(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) sigma[std::size_t(i)] = i;
  std::shuffle(sigma.begin(), sigma.end(), rng);
  MatD vp(n * 2, 2);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < 2; ++j) vp.row(sigma[std::size_t(i)] * 2 + j) = v.row(i * 2 + j);
  std::mt19937_64 prng(5);
  SliceplanConfig sc;
  sc.sub_size = 8;
  const Sliceplan plan = make_sliceplan(n, sc, prng);
  std::vector<Index> relabeled;
  for (Index o : plan.permutation()) relabeled.push_back(sigma[std::size_t(o)]);
  const Sliceplan plan_p(n, 2, 8, relabeled);
  auto loss_of = [&](const MatD& x, const Sliceplan& p) {
    MatD z = whiten_sliced(x, p, Ridge::standard());
    return oracle_cos_mse(z, n, 2);
  };
  CHECK(std::abs(loss_of(v, plan) - loss_of(vp, plan_p)) <= 1e-12);
}

TEST_CASE("wmse graph loss reports pair terms and validates config") {
  std::mt19937_64 rng(1);
  Graph<double> g;
  auto in = g.input("v", 4);
  LossConfig cfg = config(LossKind::wmse);
  cfg.d = 4;
  const auto lg = build_loss(g, in, 16, cfg.resolved(4), rng);
  CHECK(lg.terms == 16 * 6);

  LossConfig bad = config(LossKind::wmse);
  CHECK_THROWS_AS(build_loss(g, in, 16, bad, rng), ConfigError);
  bad.d = 1;
  CHECK_THROWS_AS(bad.validate(4), ConfigError);
  LossConfig c = config(LossKind::contrastive);
  c.tau = 0.0;
  CHECK_THROWS_AS(c.validate(4), ConfigError);
  LossConfig tr = config(LossKind::triplet);
  tr.margin = -1.0;
  CHECK_THROWS_AS(tr.validate(4), ConfigError);
  CHECK(parse_loss_kind("bn_mse") == LossKind::bn_mse);
  CHECK_THROWS_AS(parse_loss_kind("byol"), ConfigError);
}

TEST_CASE("contrastive examples") {
  std::mt19937_64 rng(31);
  LossConfig cfg = config(LossKind::contrastive);
  SUBCASE("K=2 has only the positive in the denominator") {
    for (int t = 0; t < 5; ++t) {
      CHECK(std::abs(contrastive_loss(random_matrix(2, 3, rng), {0, 0}, cfg, rng)) <= 1e-12);
    }
  }
  SUBCASE("orthogonal K=4 at tau=0.5 gives log 3") {
    MatD z = MatD::Identity(4, 4) * 2.5;
    CHECK(std::abs(contrastive_loss(z, {0, 0, 1, 1}, cfg, rng) - std::log(3.0)) <= 1e-12);
  }
  SUBCASE("random K=8 matches a log-sum-exp scratch") {
    for (bool normalize : {true, false}) {
      cfg.normalize = normalize;
      cfg.tau = normalize ? 0.5 : 1.0;
      MatD v = random_matrix(8, 5, rng);
      const std::vector<Index> ids = {0, 0, 1, 1, 2, 2, 3, 3};
      CHECK(std::abs(contrastive_loss(v, ids, cfg, rng) - oracle_contrastive(v, ids, cfg.tau, normalize)) <= 1e-10);
      CHECK(std::abs(eval_loss(v, 4, cfg, 1) - oracle_contrastive(v, ids, cfg.tau, normalize)) <= 1e-10);
    }
  }
  SUBCASE("large logits stay finite") {
    MatD v = random_matrix(8, 4, rng) * 1e3;
    cfg.normalize = false;
    const double l = contrastive_loss(v, {0, 0, 1, 1, 2, 2, 3, 3}, cfg, rng);
    CHECK(std::isfinite(l));
  }
}

TEST_CASE("contrastive loss falls when one positive similarity grows") {
  std::mt19937_64 rng(32);
  LossConfig cfg = config(LossKind::contrastive);
  cfg.normalize = false;
  cfg.tau = 1.0;
  const std::vector<Index> ids = {0, 0, 1, 1, 2, 2, 3, 3};
  for (int t = 0; t < 10; ++t) {
    // A spare column touched only by rows 2 and 3 raises s_23 alone.
    MatD v = MatD::Zero(8, 5);
    v.leftCols(4) = random_matrix(8, 4, rng);
    const double before = contrastive_loss(v, ids, cfg, rng);
    v(2, 4) = 0.3;
    v(3, 4) = 0.3;
    CHECK(contrastive_loss(v, ids, cfg, rng) < before);
  }
}

TEST_CASE("contrastive with whitening runs through slicing") {
  std::mt19937_64 rng(33);
  LossConfig cfg = config(LossKind::contrastive);
  cfg.whiten = true;
  cfg.slicing.sub_size = 8;
  MatD v = random_matrix(16, 3, rng);
  std::mt19937_64 a(4), b(4);
  const double l = contrastive_loss(v, layout_origin_ids(8, 2), cfg, a);
  const MatD z = whiten_sliced(v, make_sliceplan(8, cfg.resolved(3).slicing, b), Ridge::standard());
  CHECK(std::abs(l - oracle_contrastive(z, layout_origin_ids(8, 2), 0.5, true)) <= 1e-10);
  CHECK_THROWS_AS(contrastive_loss(v, {0, 1, 0, 1, 2, 3, 2, 3, 4, 5, 4, 5, 6, 7, 6, 7}, cfg, a), Error);
}

TEST_CASE("triplet examples") {
  const RowVec<double> zi = rv({1, 0}), zj = rv({1, 0}), zk = rv({0, 1});
  CHECK(triplet_loss(zi, zj, zk, 0.5) == doctest::Approx(0.0));
  CHECK(triplet_loss(rv({1, 0}), rv({0, 1}), rv({0, -1}), 0.5) == doctest::Approx(0.5));
  std::mt19937_64 rng(41);
  for (int t = 0; t < 20; ++t) {
    RowVec<double> a = random_matrix(1, 4, rng), b = random_matrix(1, 4, rng), c = random_matrix(1, 4, rng);
    const double direct = a.dot(c) - a.dot(b) + 0.3;
    CHECK(triplet_loss(a, b, c, 0.3) == doctest::Approx(direct > 0 ? direct : 0.0));
  }

  // Graph form: anchor i*d+j, positive i*d+(j+1)%d, negative from the next origin.
  const Index n = 4, d = 2;
  MatD v = random_matrix(n * d, 3, rng);
  MatD z = v.rowwise().normalized();
  double expect = 0.0;
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < d; ++j)
      expect += triplet_loss(z.row(i * d + j), z.row(i * d + (j + 1) % d), z.row(((i + 1) % n) * d + j), 0.5);
  expect /= double(n * d);
  CHECK(std::abs(eval_loss(v, n, config(LossKind::triplet), 1) - expect) <= 1e-12);
}

TEST_CASE("bn_mse examples") {
  std::mt19937_64 rng(51);
  const Index n = 16, d = 2, k = 4;
  MatD v = random_matrix(n * d, k, rng);
  const auto ids = layout_origin_ids(n, d);

  MatD same(n * d, k);
  for (Index i = 0; i < n; ++i) same.row(i * d) = same.row(i * d + 1) = v.row(i);
  CHECK(std::abs(bn_mse_loss(same, ids)) <= 1e-12);

  // Scratch: biased batch variance, eps 1e-5, no affine, then cosine MSE.
  RowVec<double> mu = v.colwise().mean();
  MatD c = v.rowwise() - mu;
  RowVec<double> var = c.array().square().colwise().mean();
  MatD s = c.array().rowwise() / (var.array() + 1e-5).sqrt();
  CHECK(max_abs(s.colwise().mean()) <= 1e-12);
  CHECK(max_abs(s.array().square().colwise().mean().matrix() - RowVec<double>::Ones(k)) <= 1e-4);
  CHECK(std::abs(bn_mse_loss(v, ids) - oracle_cos_mse(s, n, d)) <= 1e-10);
  CHECK(std::abs(eval_loss(v, n, config(LossKind::bn_mse), 1) - oracle_cos_mse(s, n, d)) <= 1e-10);
}

TEST_CASE("every loss passes grad_check") {
  std::mt19937_64 rng(61);
  const Index n = 12, k = 3;
  for (LossKind kind : {LossKind::wmse, LossKind::contrastive, LossKind::triplet, LossKind::bn_mse}) {
    for (bool normalize : {true, false}) {
      for (Index d : {2, 3}) {
        if (kind == LossKind::contrastive && d != 2) continue;
        LossConfig cfg = config(kind);
        cfg.d = d;
        cfg.normalize = normalize;
        cfg.tau = normalize ? 0.5 : 1.0;
        cfg.slicing.sub_size = 6;
        cfg.slicing.iterations = 2;
        Graph<double> g;
        auto v = g.parameter("v", random_matrix(n * d, k, rng));
        build_loss(g, v, n, cfg, rng);
        const double err = grad_check(g, {}, kind == LossKind::wmse ? 1e-4 : 1e-5);
        INFO(std::string(loss_name(kind)) << " normalize=" << normalize << " d=" << d);
        CHECK(err <= 1e-4);
      }
    }
    if (kind == LossKind::contrastive) {
      LossConfig cfg = config(kind);
      cfg.whiten = true;
      cfg.slicing.sub_size = 6;
      Graph<double> g;
      auto v = g.parameter("v", random_matrix(n * 2, k, rng));
      build_loss(g, v, n, cfg, rng);
      CHECK(grad_check(g, {}, 1e-4) <= 1e-4);
    }
  }
}

TEST_CASE("float and double graphs agree") {
  std::mt19937_64 rng(71);
  MatD v = random_matrix(32, 4, rng);
  for (LossKind kind : {LossKind::wmse, LossKind::contrastive, LossKind::triplet, LossKind::bn_mse}) {
    LossConfig cfg = config(kind).resolved(4);
    std::mt19937_64 a(3), b(3);
    Graph<double> gd;
    gd.set_output(build_loss(gd, gd.input("v", 4), 16, cfg, a).loss);
    Graph<float> gf;
    gf.set_output(build_loss(gf, gf.input("v", 4), 16, cfg, b).loss);
    const double ld = gd.forward({{"v", v}})(0, 0);
    const double lf = gf.forward({{"v", v.cast<float>()}})(0, 0);
    INFO(std::string(loss_name(kind)));
    CHECK(std::abs(ld - lf) <= 1e-4 * std::max(1.0, std::abs(ld)));
  }
}
