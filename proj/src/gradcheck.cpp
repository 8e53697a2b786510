#include "settx/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace settx {

namespace {

// Central differences cannot resolve gradients much below eps * |loss| / h;
// smaller gradients are compared on this absolute scale instead.
constexpr double kGradientFloor = 1e-3;

double evaluate(const std::function<ad::Var(ad::Tape&)>& forward) {
  ad::Tape tape;
  tape.set_grad_enabled(false);
  const ad::Var loss = forward(tape);
  if (loss.rows() != 1 || loss.cols() != 1) {
    throw ContractError("finite_diff_check: forward must return a 1x1 loss");
  }
  return loss.value()(0, 0);
}

}  // namespace

GradCheckResult finite_diff_check(const std::function<ad::Var(ad::Tape&)>& forward,
                                  std::span<Parameter* const> params, double h) {
  if (!(h > 0.0)) throw ContractError("finite_diff_check: step must be positive");
  for (Parameter* p : params) p->zero_grad();
  GradCheckResult result;
  double loss_scale = 1.0;
  {
    ad::Tape tape;
    tape.set_track_kinks(true);
    const ad::Var loss = forward(tape);
    loss_scale = std::max(1.0, std::abs(loss.value()(0, 0)));
    tape.backward(loss);
    result.kink_margin = tape.kink_margin();
  }

  for (Parameter* p : params) {
    Matrix numeric(p->value.rows(), p->value.cols());
    for (Index i = 0; i < p->value.size(); ++i) {
      double& slot = p->value.data()[i];
      const double saved = slot;
      slot = saved + h;
      const double up = evaluate(forward);
      slot = saved - h;
      const double down = evaluate(forward);
      slot = saved;
      numeric.data()[i] = (up - down) / (2.0 * h);
    }
    const double diff = (numeric - p->grad).cwiseAbs().maxCoeff();
    const double norm = std::max({numeric.cwiseAbs().maxCoeff(), p->grad.cwiseAbs().maxCoeff(),
                                  kGradientFloor * loss_scale});
    const double err = diff / norm;
    if (err > result.max_rel_error || result.worst_parameter.empty()) {
      if (err >= result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_parameter = p->name;
      }
    }
  }
  return result;
}

}  // namespace settx
