#pragma once

#include <Eigen/Core>

#include <stdexcept>
#include <string>

namespace whitebed {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Cholesky hit a non-positive (or non-finite) pivot. Usually a degenerate batch.
class NotPositiveDefinite : public Error {
 public:
  NotPositiveDefinite(Eigen::Index pivot, const std::string& what)
      : Error(what), pivot_(pivot) {}

  Eigen::Index pivot() const noexcept { return pivot_; }

 private:
  Eigen::Index pivot_;
};

class SingularMatrix : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

inline std::string shape_str(Eigen::Index rows, Eigen::Index cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

}  // namespace whitebed
