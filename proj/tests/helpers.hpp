#pragma once

#include "settx/autodiff.hpp"
#include "settx/check.hpp"
#include "settx/rng.hpp"

#include <memory>
#include <vector>

namespace settx::testing {

inline Matrix random_matrix(Index rows, Index cols, Rng& rng, double spread = 1.0) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = spread * rng.normal();
  return m;
}

/// Scalar projection of a node onto a fixed random direction, so that every
/// output entry contributes to the gradient with a different weight.
inline ad::Var project(const ad::Var& out, std::uint64_t seed = 99) {
  Rng rng(seed);
  ad::Tape& tape = *out.tape();
  const ad::Var flat = ad::reshape(out, 1, out.rows() * out.cols());
  return ad::matmul(flat, tape.constant(random_matrix(flat.cols(), 1, rng)));
}

/// Owned parameter leaves for op-level gradient checks.
struct Leaves {
  std::vector<std::unique_ptr<Parameter>> owned;
  std::vector<Parameter*> ptrs;

  Parameter& add(Matrix value) {
    owned.push_back(std::make_unique<Parameter>("p" + std::to_string(owned.size()), std::move(value)));
    ptrs.push_back(owned.back().get());
    return *owned.back();
  }
};

using settx::permute_rows;
using settx::random_permutation;

}  // namespace settx::testing
