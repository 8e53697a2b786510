#include "settx/mog.hpp"

#include <limits>
#include <unordered_map>

namespace settx {

EmStepResult em_step(const Matrix& x, const MoGParams& theta, double floor) {
  const Matrix joint = mog_log_joint(x, theta);
  const Index n = x.rows();
  const Index k = theta.components();
  Matrix resp(n, k);
  for (Index i = 0; i < n; ++i) {
    const double lse = log_sum_exp(joint.row(i));
    resp.row(i) = (joint.row(i).array() - lse).exp().matrix();
  }

  EmStepResult out{theta, std::vector<bool>(static_cast<std::size_t>(k), false)};
  const Vector mass = resp.colwise().sum().transpose();
  const double floor_var = floor * floor;
  for (Index j = 0; j < k; ++j) {
    if (mass(j) < 1e-12) {
      out.empty[static_cast<std::size_t>(j)] = true;
      continue;
    }
    const RowVector mu = (resp.col(j).transpose() * x) / mass(j);
    RowVector var = RowVector::Zero(x.cols());
    for (Index i = 0; i < n; ++i) var += resp(i, j) * (x.row(i) - mu).array().square().matrix();
    var /= mass(j);
    out.params.means.row(j) = mu;
    out.params.scales.row(j) = var.cwiseMax(floor_var).cwiseSqrt();
  }
  out.params.weights = (mass / static_cast<double>(n)).cwiseMax(std::numeric_limits<double>::min());
  out.params.weights /= out.params.weights.sum();
  return out;
}

std::vector<int> assign_clusters(const Matrix& x, const MoGParams& theta) {
  const Matrix joint = mog_log_joint(x, theta);
  std::vector<int> labels(static_cast<std::size_t>(x.rows()));
  for (Index i = 0; i < joint.rows(); ++i) {
    Index best = 0;
    for (Index j = 1; j < joint.cols(); ++j) {
      if (joint(i, j) > joint(i, best)) best = j;
    }
    labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return labels;
}

MoGParams mog_head(const Matrix& raw, double floor) {
  if (raw.cols() < 3 || (raw.cols() - 1) % 2 != 0) {
    throw DimensionError("mog_head: rows must be 1 + 2D wide, got " + shape_str(raw));
  }
  const Index d = (raw.cols() - 1) / 2;
  MoGParams theta;
  theta.weights = settx::softmax_rows(raw.col(0).transpose(), 1.0).transpose();
  theta.means = raw.middleCols(1, d);
  theta.scales = raw.middleCols(1 + d, d).unaryExpr([floor](double v) { return softplus(v) + floor; });
  return theta;
}

namespace ad {

Var mog_average_loglik(const Var& raw, const Matrix& x, double floor) {
  const MoGParams theta = mog_head(raw.value(), floor);
  const Index n = x.rows();
  const Index k = theta.components();
  const Index d = theta.dims();
  if (x.cols() != d) {
    throw DimensionError("mog_average_loglik: points " + shape_str(x) + " for head " +
                         shape_str(raw.rows(), raw.cols()));
  }
  if (n == 0) throw ContractError("mog_average_loglik: empty dataset");
  const Matrix joint = mog_log_joint(x, theta);
  double total = 0.0;
  auto resp = std::make_shared<Matrix>(n, k);
  for (Index i = 0; i < n; ++i) {
    const double lse = log_sum_exp(joint.row(i));
    total += lse;
    resp->row(i) = (joint.row(i).array() - lse).exp().matrix();
  }
  const double avg = total / static_cast<double>(n);

  return raw.tape()->record(
      Matrix::Constant(1, 1, avg), "mog_average_loglik", {raw},
      [raw, x, theta, resp, n, k, d](Tape& t, const Matrix&, const Matrix& g) {
        const double coef = g(0, 0) / static_cast<double>(n);
        Matrix draw = Matrix::Zero(k, 1 + 2 * d);
        const Vector mass = resp->colwise().sum().transpose();
        for (Index j = 0; j < k; ++j) {
          // d/d logit_j of sum_i log sum_l pi_l N_il = sum_i r_ij - n pi_j
          draw(j, 0) = mass(j) - static_cast<double>(n) * theta.weights(j);
          for (Index c = 0; c < d; ++c) {
            const double sigma = theta.scales(j, c);
            const double inv_var = 1.0 / (sigma * sigma);
            double dmu = 0.0, dsigma = 0.0;
            for (Index i = 0; i < n; ++i) {
              const double r = (*resp)(i, j);
              const double diff = x(i, c) - theta.means(j, c);
              dmu += r * diff * inv_var;
              dsigma += r * (diff * diff * inv_var - 1.0) / sigma;
            }
            draw(j, 1 + c) = dmu;
            draw(j, 1 + d + c) = dsigma * sigmoid(raw.value()(j, 1 + d + c));
          }
        }
        t.accumulate(raw, draw * coef);
      });
}

}  // namespace ad

double adjusted_rand_index(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) {
    throw DimensionError("adjusted_rand_index: labelings of length " + std::to_string(a.size()) +
                         " and " + std::to_string(b.size()));
  }
  auto pairs = [](std::int64_t m) { return m * (m - 1) / 2; };
  std::unordered_map<int, std::int64_t> rows, cols;
  std::unordered_map<std::int64_t, std::int64_t> cells;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ++rows[a[i]];
    ++cols[b[i]];
    ++cells[(static_cast<std::int64_t>(a[i]) << 32) ^ static_cast<std::uint32_t>(b[i])];
  }
  std::int64_t index = 0, sum_a = 0, sum_b = 0;
  for (const auto& [key, count] : cells) index += pairs(count);
  for (const auto& [key, count] : rows) sum_a += pairs(count);
  for (const auto& [key, count] : cols) sum_b += pairs(count);
  const double total = static_cast<double>(pairs(static_cast<std::int64_t>(a.size())));
  const double expected = total > 0 ? static_cast<double>(sum_a) * static_cast<double>(sum_b) / total : 0.0;
  const double maximum = 0.5 * static_cast<double>(sum_a + sum_b);
  // Only reachable when both labelings describe the same trivial partition.
  if (maximum == expected) return 1.0;
  return (static_cast<double>(index) - expected) / (maximum - expected);
}

}  // namespace settx
