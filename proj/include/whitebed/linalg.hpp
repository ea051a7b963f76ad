#pragma once

// Dense primitives behind batch whitening: mean, covariance, Cholesky,
// triangular inverse, and the whitening transform itself.
//
// Everything here is a free function templated on the scalar type. The
// routines only use field operations, sqrt and real-part comparisons, so they
// also instantiate for std::complex<double>, which the tests use for
// complex-step differentiation of the factorization chain.

#include "whitebed/errors.hpp"

#include <Eigen/Core>

#include <cmath>
#include <complex>
#include <string>
#include <type_traits>

namespace whitebed {

using Index = Eigen::Index;

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using MatD = Mat<double>;
using MatF = Mat<float>;

namespace detail {

template <typename T>
struct is_complex : std::false_type {};
template <typename T>
struct is_complex<std::complex<T>> : std::true_type {};

template <typename Scalar>
double real_part(const Scalar& x) {
  if constexpr (is_complex<Scalar>::value) {
    return static_cast<double>(x.real());
  } else {
    return static_cast<double>(x);
  }
}

template <typename Scalar>
bool finite(const Scalar& x) {
  if constexpr (is_complex<Scalar>::value) {
    return std::isfinite(x.real()) && std::isfinite(x.imag());
  } else {
    return std::isfinite(x);
  }
}

}  // namespace detail

/// Diagonal regularizer added to a covariance before factorization:
/// absolute + relative * mean(diag(sigma)).
struct Ridge {
  double absolute = 0.0;
  double relative = 0.0;

  static constexpr double kDefaultRelative = 1e-6;

  static Ridge none() { return {}; }
  static Ridge fixed(double value) { return {value, 0.0}; }
  static Ridge scaled(double factor) { return {0.0, factor}; }
  static Ridge standard() { return scaled(kDefaultRelative); }

  template <typename Scalar>
  Scalar amount(const Mat<Scalar>& sigma) const {
    Scalar r = Scalar(absolute);
    if (relative != 0.0 && sigma.rows() > 0) {
      r += Scalar(relative) * sigma.diagonal().sum() / Scalar(double(sigma.rows()));
    }
    return r;
  }
};

/// Column means of a K x k batch (one sample per row).
template <typename Derived>
RowVec<typename Derived::Scalar> mean_rows(const Eigen::MatrixBase<Derived>& v) {
  using Scalar = typename Derived::Scalar;
  if (v.rows() == 0 || v.cols() == 0) {
    throw ShapeError("mean_rows: empty matrix " + shape_str(v.rows(), v.cols()));
  }
  return v.colwise().sum() / Scalar(double(v.rows()));
}

/// Unbiased covariance, normalized by 1/(K-1).
template <typename Derived, typename DerivedMu>
Mat<typename Derived::Scalar> covariance(const Eigen::MatrixBase<Derived>& v,
                                         const Eigen::MatrixBase<DerivedMu>& mu) {
  using Scalar = typename Derived::Scalar;
  if (v.rows() < 2) {
    throw ShapeError("covariance: need at least 2 samples, got " + std::to_string(v.rows()));
  }
  if (mu.size() != v.cols()) {
    throw ShapeError("covariance: mean has " + std::to_string(mu.size()) + " entries, batch has " +
                     std::to_string(v.cols()) + " columns");
  }
  RowVec<Scalar> m(v.cols());
  for (Index j = 0; j < v.cols(); ++j) m(j) = mu(j);
  Mat<Scalar> centered = v.rowwise() - m;
  Mat<Scalar> sigma = centered.transpose() * centered;
  sigma /= Scalar(double(v.rows() - 1));
  return sigma;
}

/// Lower Cholesky factor of (S + S^T)/2 + ridge*I.
template <typename Derived>
Mat<typename Derived::Scalar> cholesky(const Eigen::MatrixBase<Derived>& s,
                                       typename Derived::Scalar ridge = 0) {
  using Scalar = typename Derived::Scalar;
  const Index k = s.rows();
  if (s.cols() != k) {
    throw ShapeError("cholesky: matrix must be square, got " + shape_str(s.rows(), s.cols()));
  }
  if (detail::real_part(ridge) < 0.0) {
    throw Error("cholesky: ridge must be non-negative");
  }
  Mat<Scalar> a = (s + s.transpose()) / Scalar(2);
  a.diagonal().array() += ridge;

  Mat<Scalar> l = Mat<Scalar>::Zero(k, k);
  for (Index j = 0; j < k; ++j) {
    // No conjugation here: Eigen's dot() would conjugate complex operands.
    Scalar pivot = a(j, j) - l.row(j).head(j).cwiseProduct(l.row(j).head(j)).sum();
    if (!detail::finite(pivot) || !(detail::real_part(pivot) > 0.0)) {
      throw NotPositiveDefinite(j, "cholesky: non-positive pivot at index " + std::to_string(j) +
                                       " (value " + std::to_string(detail::real_part(pivot)) +
                                       "); matrix is not positive definite");
    }
    using std::sqrt;
    const Scalar d = sqrt(pivot);
    l(j, j) = d;
    for (Index i = j + 1; i < k; ++i) {
      l(i, j) = (a(i, j) - l.row(i).head(j).cwiseProduct(l.row(j).head(j)).sum()) / d;
    }
  }
  return l;
}

/// Inverse of a lower-triangular matrix by forward substitution.
template <typename Derived>
Mat<typename Derived::Scalar> lower_tri_inverse(const Eigen::MatrixBase<Derived>& l) {
  using Scalar = typename Derived::Scalar;
  const Index k = l.rows();
  if (l.cols() != k) {
    throw ShapeError("lower_tri_inverse: matrix must be square, got " + shape_str(l.rows(), l.cols()));
  }
  for (Index i = 0; i < k; ++i) {
    if (l(i, i) == Scalar(0)) {
      throw SingularMatrix("lower_tri_inverse: zero diagonal entry at index " + std::to_string(i));
    }
  }
  Mat<Scalar> w = Mat<Scalar>::Zero(k, k);
  for (Index i = 0; i < k; ++i) {
    w(i, i) = Scalar(1) / l(i, i);
    for (Index j = 0; j < i; ++j) {
      // W(i, j) = -(sum_{m=j}^{i-1} L(i, m) W(m, j)) / L(i, i)
      Scalar acc = l.row(i).segment(j, i - j).cwiseProduct(w.col(j).segment(j, i - j).transpose()).sum();
      w(i, j) = -acc / l(i, i);
    }
  }
  return w;
}

/// The per-batch whitening quadruple plus the ridge that was applied.
template <typename Scalar>
struct WhiteningStats {
  RowVec<Scalar> mu;
  Mat<Scalar> sigma;
  Mat<Scalar> chol;
  Mat<Scalar> w;
  Scalar ridge_used = Scalar(0);
  /// Relative ridge factor; the backward pass needs it because the ridge then depends on sigma.
  double ridge_relative = 0.0;
};

template <typename Scalar>
struct Whitened {
  Mat<Scalar> z;
  WhiteningStats<Scalar> stats;
};

/// Z = (V - mu) W^T, i.e. z_i = W_V (v_i - mu_V) row by row, with W_V = chol(Sigma_V)^{-1}.
template <typename Derived>
Whitened<typename Derived::Scalar> whiten_batch(const Eigen::MatrixBase<Derived>& v, const Ridge& ridge) {
  using Scalar = typename Derived::Scalar;
  Whitened<Scalar> out;
  auto& st = out.stats;
  st.mu = mean_rows(v);
  st.sigma = covariance(v, st.mu);
  st.ridge_used = ridge.amount(st.sigma);
  st.ridge_relative = ridge.relative;
  st.chol = cholesky(st.sigma, st.ridge_used);
  st.w = lower_tri_inverse(st.chol);
  out.z = (v.rowwise() - st.mu) * st.w.transpose();
  return out;
}

template <typename Derived>
Whitened<typename Derived::Scalar> whiten_batch(const Eigen::MatrixBase<Derived>& v, double ridge = 0.0) {
  return whiten_batch(v, Ridge::fixed(ridge));
}

/// Hadamard mask used by the whitening backward pass: 1 below the diagonal, 1/2 on it, 0 above.
template <typename Scalar>
Mat<Scalar> p_matrix(Index k) {
  Mat<Scalar> p = Mat<Scalar>::Zero(k, k);
  for (Index i = 0; i < k; ++i) {
    for (Index j = 0; j < i; ++j) p(i, j) = Scalar(1);
    p(i, i) = Scalar(0.5);
  }
  return p;
}

/// Gradient of a scalar loss with respect to the raw (uncentered) batch V,
/// given dL/dZ for Z = whiten_batch(V).z.
///
/// Works in the column orientation (samples as columns) internally:
///   dL/dW     = dL/dZ V^T
///   dL/dSigma = -1/2 W^T (P o (dL/dW W^T) + (P o (dL/dW W^T))^T) W
///   dL/dV     = 2/(K-1) dL/dSigma V + W^T dL/dZ
/// followed by the Jacobian of the mean subtraction.
template <typename Scalar>
Mat<Scalar> whitening_backward(const Mat<Scalar>& dl_dz, const Mat<Scalar>& v,
                               const WhiteningStats<Scalar>& stats) {
  const Index rows = v.rows();
  const Index k = v.cols();
  if (dl_dz.rows() != rows || dl_dz.cols() != k) {
    throw ShapeError("whitening_backward: cotangent is " + shape_str(dl_dz.rows(), dl_dz.cols()) +
                     ", batch is " + shape_str(rows, k));
  }
  if (stats.w.rows() != k || stats.mu.size() != k) {
    throw ShapeError("whitening_backward: stats are for dimension " + std::to_string(stats.w.rows()) +
                     ", batch has " + std::to_string(k));
  }
  const Mat<Scalar>& w = stats.w;
  Mat<Scalar> centered = v.rowwise() - stats.mu;

  // Row-major batch: dZ_cols = dl_dz^T, V_cols = centered^T.
  Mat<Scalar> dl_dw = dl_dz.transpose() * centered;
  Mat<Scalar> masked = p_matrix<Scalar>(k).cwiseProduct(dl_dw * w.transpose());
  Mat<Scalar> dl_dsigma = Scalar(-0.5) * w.transpose() * (masked + masked.transpose()) * w;
  if (stats.ridge_relative != 0.0) {
    // ridge = rel * trace(sigma) / k contributes rel/k * trace(dL/dSigma') on the diagonal.
    dl_dsigma.diagonal().array() +=
        Scalar(stats.ridge_relative) * dl_dsigma.trace() / Scalar(double(k));
  }

  Mat<Scalar> dl_dcentered = (Scalar(2) / Scalar(double(rows - 1))) * centered * dl_dsigma + dl_dz * w;
  RowVec<Scalar> col_mean = dl_dcentered.colwise().sum() / Scalar(double(rows));
  return dl_dcentered.rowwise() - col_mean;
}

}  // namespace whitebed
