#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace caseq {

/// Dense storage is row-major throughout so that a reshape of a row slice
/// (context embedding -> d x d projection) is a plain reinterpretation.
template <typename Scalar>
using MatrixR = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVectorR = Eigen::Matrix<Scalar, 1, Eigen::Dynamic, Eigen::RowMajor>;

using Matrix = MatrixR<double>;
using RowVector = RowVectorR<double>;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

using Rng = std::mt19937_64;

// Error taxonomy. The CLI maps these onto exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DimensionError : Error {
  using Error::Error;
};
struct DomainError : Error {
  using Error::Error;
};
struct ParameterError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct RangeError : Error {
  using Error::Error;
};
struct ParseError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

std::string shape_string(Index rows, Index cols);

template <typename Derived>
std::string shape_of(const Eigen::DenseBase<Derived>& m) {
  return shape_string(m.rows(), m.cols());
}

/// Uniform draw on the open interval (0, 1).
double uniform_open(Rng& rng);

/// Standard Gumbel(0, 1) draw.
double gumbel(Rng& rng);

/// Derives an independent stream seed from a base seed and a stream index.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

}  // namespace caseq
