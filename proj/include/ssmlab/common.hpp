#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace ssmlab {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or argument.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// Non-finite state encountered while scanning. layer is -1 when the scan was
// run outside a model.
class ScanOverflow : public NumericError {
 public:
  ScanOverflow(int layer, int step)
      : NumericError("state overflow at layer " + std::to_string(layer) + ", step " +
                     std::to_string(step)),
        layer_(layer),
        step_(step) {}

  int layer() const noexcept { return layer_; }
  int step() const noexcept { return step_; }

 private:
  int layer_;
  int step_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Truncated or malformed checkpoint.
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

class VersionError : public IoError {
 public:
  using IoError::IoError;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ConfigError(what);
}

}  // namespace ssmlab
