#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace settx {

using Index = Eigen::Index;

// Dense row-major matrix, the only numeric carrier in the library.
template <typename Scalar>
using MatrixT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVectorT = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
template <typename Scalar>
using VectorT = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixT<double>;
using RowVector = RowVectorT<double>;
using Vector = VectorT<double>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Violated precondition that is not a shape problem (non-scalar loss, bad scale, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::string shape_str(Index rows, Index cols) {
  return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

template <typename Derived>
std::string shape_str(const Eigen::DenseBase<Derived>& m) {
  return shape_str(m.rows(), m.cols());
}

// Largest absolute entry; zero for empty matrices.
template <typename Derived>
typename Derived::Scalar max_abs(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  return m.size() == 0 ? Scalar(0) : m.cwiseAbs().maxCoeff();
}

// ||a - b||_inf / max(||a||_inf, ||b||_inf), with 0/0 treated as 0.
template <typename A, typename B>
double relative_error(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError("relative_error: " + shape_str(a) + " vs " + shape_str(b));
  }
  const double diff = static_cast<double>(max_abs(a - b));
  const double scale = std::max<double>(max_abs(a), max_abs(b));
  if (diff == 0.0) return 0.0;
  return scale > 0.0 ? diff / scale : diff;
}

}  // namespace settx
