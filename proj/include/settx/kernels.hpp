#pragma once

// Dense forward kernels shared by the tape ops and by the reference routes used
// in tests. Everything here is a pure function of its arguments.

#include "settx/tensor.hpp"

#include <cmath>

namespace settx {

/// Row-wise softmax of x / scale with the row maximum subtracted first.
template <typename Derived>
MatrixT<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& x,
                                               typename Derived::Scalar scale) {
  using Scalar = typename Derived::Scalar;
  if (!(scale > Scalar(0))) throw ContractError("softmax_rows: scale must be positive");
  // Row-major broadcasting is slow in Eigen, so shifts and rescales loop over
  // rows while the exp runs over the whole buffer.
  MatrixT<Scalar> out(x.rows(), x.cols());
  const Scalar inv_scale = Scalar(1) / scale;
  for (Index i = 0; i < x.rows(); ++i) {
    const Scalar top = x.row(i).maxCoeff();
    out.row(i).array() = (x.row(i).array() - top) * inv_scale;
  }
  out.array() = out.array().exp();
  for (Index i = 0; i < out.rows(); ++i) out.row(i) /= out.row(i).sum();
  return out;
}

template <typename Scalar>
struct LayerNormCache {
  MatrixT<Scalar> normalized;  // (x - mean) * inv_std, before gain/bias
  VectorT<Scalar> inv_std;
};

/// Standardizes each row over its columns, then applies gain and bias.
template <typename Derived, typename G, typename B>
MatrixT<typename Derived::Scalar> layernorm_rows(
    const Eigen::MatrixBase<Derived>& x, const Eigen::MatrixBase<G>& gain,
    const Eigen::MatrixBase<B>& bias, typename Derived::Scalar eps,
    LayerNormCache<typename Derived::Scalar>* cache = nullptr) {
  using Scalar = typename Derived::Scalar;
  const Index d = x.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d) {
    throw DimensionError("layernorm_rows: input " + shape_str(x) + ", gain " + shape_str(gain) +
                         ", bias " + shape_str(bias));
  }
  if (!(eps > Scalar(0))) throw ContractError("layernorm_rows: eps must be positive");
  MatrixT<Scalar> normalized(x.rows(), d);
  VectorT<Scalar> inv_std(x.rows());
  MatrixT<Scalar> out(x.rows(), d);
  for (Index i = 0; i < x.rows(); ++i) {
    const Scalar mean = x.row(i).mean();
    normalized.row(i).array() = x.row(i).array() - mean;
    const Scalar var = normalized.row(i).squaredNorm() / Scalar(d);
    inv_std(i) = Scalar(1) / std::sqrt(var + eps);
    normalized.row(i) *= inv_std(i);
    out.row(i).array() = normalized.row(i).array() * gain.row(0).array() + bias.row(0).array();
  }
  if (cache) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

/// omega(Q K^T / scale) V, with omega applied entrywise to the scores in
/// place of a row softmax.
template <typename DQ, typename DK, typename DV, typename Omega>
MatrixT<typename DQ::Scalar> attention_elementwise(const Eigen::MatrixBase<DQ>& q,
                                                   const Eigen::MatrixBase<DK>& k,
                                                   const Eigen::MatrixBase<DV>& v,
                                                   typename DQ::Scalar scale, Omega omega) {
  using Scalar = typename DQ::Scalar;
  if (q.cols() != k.cols() || k.rows() != v.rows()) {
    throw DimensionError("attention_elementwise: q " + shape_str(q) + ", k " + shape_str(k) +
                         ", v " + shape_str(v));
  }
  MatrixT<Scalar> scores = (q * k.transpose()) / scale;
  scores = scores.unaryExpr(omega);
  return scores * v;
}

/// log(1 + exp(x)) without overflow.
template <typename Scalar>
Scalar softplus(Scalar x) {
  using std::abs, std::exp, std::log1p, std::max;
  return max(x, Scalar(0)) + log1p(exp(-abs(x)));
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  using std::exp;
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + exp(-x));
  const Scalar e = exp(x);
  return e / (Scalar(1) + e);
}

/// log(sum(exp(v))) over a row or column expression.
template <typename Derived>
typename Derived::Scalar log_sum_exp(const Eigen::MatrixBase<Derived>& v) {
  using Scalar = typename Derived::Scalar;
  const Scalar top = v.maxCoeff();
  if (!std::isfinite(static_cast<double>(top))) return top;
  return top + std::log((v.array() - top).exp().sum());
}

}  // namespace settx
