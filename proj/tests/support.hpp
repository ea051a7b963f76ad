#pragma once

// Shared test helpers: seeded random matrices and small independent oracles.

#include "whitebed/linalg.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <random>

namespace whitebed::test {

inline MatD random_matrix(Index rows, Index cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  MatD m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

inline MatD random_spd(Index k, std::mt19937_64& rng) {
  MatD a = random_matrix(k, k, rng);
  MatD s = a * a.transpose();
  s.diagonal().array() += double(k) * 0.1;
  return s;
}

inline double max_abs(const MatD& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

/// Exactly white batch: zero column means and unbiased covariance I.
inline MatD white_batch(Index rows, Index cols, std::mt19937_64& rng) {
  MatD a = random_matrix(rows, cols + 1, rng);
  a.col(0).setOnes();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(rows, cols + 1);
  MatD v = q.rightCols(cols) * std::sqrt(double(rows - 1));
  return v;
}

}  // namespace whitebed::test
