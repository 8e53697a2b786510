#pragma once

#include "settx/autodiff.hpp"
#include "settx/kernels.hpp"

#include <numbers>
#include <span>
#include <vector>

namespace settx {

/// Smallest standard deviation a predicted or refined component may have.
inline constexpr double kSigmaFloor = 1e-3;

/// Diagonal-covariance Gaussian mixture.
template <typename Scalar = double>
struct MixtureParams {
  VectorT<Scalar> weights;  // k, on the simplex
  MatrixT<Scalar> means;    // k x D
  MatrixT<Scalar> scales;   // k x D standard deviations

  Index components() const { return weights.size(); }
  Index dims() const { return means.cols(); }

  /// Shapes agree and all scales are positive; ContractError otherwise.
  void validate() const {
    if (means.rows() != weights.size() || scales.rows() != weights.size() ||
        scales.cols() != means.cols()) {
      throw DimensionError("mixture: weights " + std::to_string(weights.size()) + ", means " +
                           shape_str(means) + ", scales " + shape_str(scales));
    }
    if (!(scales.array() > Scalar(0)).all()) {
      throw ContractError("mixture: scales must be positive");
    }
  }
};

using MoGParams = MixtureParams<double>;

/// log pi_j + log N(x_i; mu_j, diag sigma_j^2), as an n x k matrix.
template <typename Derived>
MatrixT<typename Derived::Scalar> mog_log_joint(const Eigen::MatrixBase<Derived>& x,
                                                const MixtureParams<typename Derived::Scalar>& theta) {
  using Scalar = typename Derived::Scalar;
  theta.validate();
  if (x.cols() != theta.dims()) {
    throw DimensionError("mixture: points " + shape_str(x) + " for " +
                         std::to_string(theta.dims()) + "-dimensional components");
  }
  const Index k = theta.components();
  const Scalar half_log_2pi = Scalar(0.5) * std::log(Scalar(2) * std::numbers::pi_v<Scalar>);
  MatrixT<Scalar> out(x.rows(), k);
  for (Index j = 0; j < k; ++j) {
    const RowVectorT<Scalar> inv = theta.scales.row(j).cwiseInverse();
    const Scalar norm = std::log(theta.weights(j)) - theta.scales.row(j).array().log().sum() -
                        half_log_2pi * Scalar(theta.dims());
    for (Index i = 0; i < x.rows(); ++i) {
      const Scalar quad =
          ((x.row(i) - theta.means.row(j)).array() * inv.array()).square().sum();
      out(i, j) = norm - Scalar(0.5) * quad;
    }
  }
  return out;
}

template <typename Scalar>
struct LogLikelihood {
  Scalar total = 0;
  Scalar per_datum = 0;
};

/// Mixture log-likelihood via a per-point log-sum-exp over components.
template <typename Derived>
LogLikelihood<typename Derived::Scalar> mog_loglik(
    const Eigen::MatrixBase<Derived>& x, const MixtureParams<typename Derived::Scalar>& theta) {
  using Scalar = typename Derived::Scalar;
  const MatrixT<Scalar> joint = mog_log_joint(x, theta);
  LogLikelihood<Scalar> ll;
  for (Index i = 0; i < joint.rows(); ++i) ll.total += log_sum_exp(joint.row(i));
  ll.per_datum = x.rows() > 0 ? ll.total / Scalar(x.rows()) : Scalar(0);
  return ll;
}

struct EmStepResult {
  MoGParams params;
  /// Components whose total responsibility fell below 1e-12; their means and
  /// scales were carried over unchanged.
  std::vector<bool> empty;
};

/// One E-step plus one M-step, variances floored at floor^2.
EmStepResult em_step(const Matrix& x, const MoGParams& theta, double floor = kSigmaFloor);

/// Most probable component per point; ties go to the lowest index.
std::vector<int> assign_clusters(const Matrix& x, const MoGParams& theta);

/// Turns k rows of [logit, D means, D raw scales] into mixture parameters:
/// softmax over logits, means as-is, scales softplus(raw) + floor.
MoGParams mog_head(const Matrix& raw, double floor = kSigmaFloor);

namespace ad {

/// Average per-point log-likelihood of x under mog_head(raw), as a 1x1 node
/// differentiable with respect to raw.
Var mog_average_loglik(const Var& raw, const Matrix& x, double floor = kSigmaFloor);

}  // namespace ad

/// Chance-corrected pair-counting agreement between two labelings.
double adjusted_rand_index(std::span<const int> a, std::span<const int> b);

}  // namespace settx
