#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace gblm {

// Dense row-major storage matches the on-disk tensor layout, so weight
// matrices can be copied in and out of containers without transposition.
using MatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MaskMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VectorD = Eigen::VectorXd;

using Index = Eigen::Index;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or truncated container file. `offset` is the byte offset of the
/// first violation found.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Dimension or shape disagreement between operands.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite value, singular matrix or any other numeric precondition.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Bad user input: unknown names, out-of-range options, missing records.
class InputError : public Error {
 public:
  using Error::Error;
};

}  // namespace gblm
