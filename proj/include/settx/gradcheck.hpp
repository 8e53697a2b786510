#pragma once

#include "settx/autodiff.hpp"

#include <functional>
#include <span>
#include <string>

namespace settx {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  /// Smallest distance of a relu/abs input or max-pool winner from a switch
  /// point at the unperturbed parameters. Central differences are only
  /// meaningful when this is well above h times the input sensitivity.
  double kink_margin = 0.0;
};

/// Compares tape gradients against central differences.
///
/// `forward` must build a 1x1 loss on the tape it is given, pulling the
/// parameters in through Tape::param. For each parameter the error is
/// ||fd - tape||_inf / max(||fd||_inf, ||tape||_inf, 1e-3 max(1, |loss|))
/// over its entries; the floor keeps gradients below the resolution of the
/// differences from being compared on noise. The worst parameter is reported. Parameter values are restored on return and
/// their gradients are left holding the tape gradient.
GradCheckResult finite_diff_check(const std::function<ad::Var(ad::Tape&)>& forward,
                                  std::span<Parameter* const> params, double h = 1e-5);

}  // namespace settx
