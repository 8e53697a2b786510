#include "helpers.hpp"
#include "settx/blocks.hpp"
#include "settx/gradcheck.hpp"

#include <doctest.h>

using namespace settx;
using settx::testing::Leaves;
using settx::testing::project;
using settx::testing::random_matrix;

namespace {

constexpr double kGradTol = 1e-6;

double check(Leaves& leaves, const std::function<ad::Var(ad::Tape&)>& f) {
  return finite_diff_check(f, leaves.ptrs).max_rel_error;
}

// Perturbs values away from ReLU kinks and max ties so that central
// differences stay on one smooth piece.
Matrix away_from_zero(Matrix m) {
  for (Index i = 0; i < m.size(); ++i) {
    double& v = m.data()[i];
    if (std::abs(v) < 0.05) v = v < 0 ? v - 0.1 : v + 0.1;
  }
  return m;
}

}  // namespace

TEST_CASE("elementwise and linear ops match finite differences") {
  Rng rng(1);
  Leaves l;
  auto& a = l.add(random_matrix(3, 4, rng));
  auto& b = l.add(random_matrix(4, 2, rng));
  auto& c = l.add(random_matrix(3, 4, rng));
  auto& s = l.add(random_matrix(1, 1, rng));

  CHECK(check(l, [&](ad::Tape& t) { return project(ad::matmul(t.param(a), t.param(b))); }) < kGradTol);
  CHECK(check(l, [&](ad::Tape& t) { return project(ad::add(t.param(a), t.param(c))); }) < kGradTol);
  CHECK(check(l, [&](ad::Tape& t) { return project(ad::sub(t.param(a), t.param(c))); }) < kGradTol);
  CHECK(check(l, [&](ad::Tape& t) { return project(ad::scale(t.param(a), -2.5)); }) < kGradTol);
  CHECK(check(l, [&](ad::Tape& t) { return project(ad::mul_scalar(t.param(a), t.param(s))); }) < kGradTol);
  CHECK(check(l, [&](ad::Tape& t) { return project(ad::transpose(t.param(a))); }) < kGradTol);
  CHECK(check(l, [&](ad::Tape& t) { return ad::sum(t.param(a)); }) < kGradTol);
  CHECK(check(l, [&](ad::Tape& t) { return ad::mean(t.param(c)); }) < kGradTol);
}

TEST_CASE("piecewise ops match finite differences away from kinks") {
  Rng rng(2);
  Leaves l;
  auto& a = l.add(away_from_zero(random_matrix(5, 3, rng)));
  CHECK(check(l, [&](ad::Tape& t) { return project(ad::relu(t.param(a))); }) < kGradTol);
  CHECK(check(l, [&](ad::Tape& t) { return project(ad::abs(t.param(a))); }) < kGradTol);
}

TEST_CASE("softmax and layernorm match finite differences") {
  Rng rng(3);
  Leaves l;
  auto& x = l.add(random_matrix(4, 6, rng, 2.0));
  auto& gain = l.add(random_matrix(1, 6, rng));
  auto& bias = l.add(random_matrix(1, 6, rng));
  CHECK(check(l, [&](ad::Tape& t) { return project(ad::softmax_rows(t.param(x), 1.7)); }) < kGradTol);
  CHECK(check(l, [&](ad::Tape& t) {
          return project(ad::layernorm_rows(t.param(x), t.param(gain), t.param(bias), 1e-5));
        }) < kGradTol);
}

TEST_CASE("structural ops match finite differences") {
  Rng rng(4);
  Leaves l;
  auto& a = l.add(random_matrix(4, 6, rng));
  auto& b = l.add(random_matrix(4, 2, rng));
  auto& row = l.add(random_matrix(1, 6, rng));

  CHECK(check(l, [&](ad::Tape& t) { return project(ad::concat_cols({t.param(a), t.param(b)})); }) < kGradTol);
  CHECK(check(l, [&](ad::Tape& t) {
          auto parts = ad::split_cols(t.param(a), 3);
          return project(ad::concat_cols({parts[2], parts[0]}));
        }) < kGradTol);
  CHECK(check(l, [&](ad::Tape& t) { return project(ad::concat_rows({t.param(a), t.param(row)})); }) < kGradTol);
  CHECK(check(l, [&](ad::Tape& t) { return project(ad::slice_rows(t.param(a), 1, 2)); }) < kGradTol);
  CHECK(check(l, [&](ad::Tape& t) { return project(ad::broadcast_row(t.param(row), 3)); }) < kGradTol);
  CHECK(check(l, [&](ad::Tape& t) { return project(ad::add_row(t.param(a), t.param(row))); }) < kGradTol);
  CHECK(check(l, [&](ad::Tape& t) { return project(ad::tile_rows(t.param(b), 3)); }) < kGradTol);
  CHECK(check(l, [&](ad::Tape& t) { return project(ad::reshape(t.param(a), 3, 8)); }) < kGradTol);
}

TEST_CASE("segment pooling and broadcast match finite differences") {
  Rng rng(5);
  Leaves l;
  auto& x = l.add(random_matrix(7, 3, rng));
  auto& rows = l.add(random_matrix(3, 3, rng));
  const ad::Segments segs{{2, 4, 1}};
  for (ad::Pool pool : {ad::Pool::Mean, ad::Pool::Sum, ad::Pool::Max}) {
    CHECK(check(l, [&](ad::Tape& t) { return project(ad::segment_pool(t.param(x), segs, pool)); }) < kGradTol);
  }
  CHECK(check(l, [&](ad::Tape& t) { return project(ad::segment_broadcast(t.param(rows), segs)); }) < kGradTol);
}

TEST_CASE("segmented attention matches finite differences") {
  Rng rng(6);
  Leaves l;
  auto& q = l.add(random_matrix(5, 4, rng));
  auto& k = l.add(random_matrix(7, 4, rng));
  auto& v = l.add(random_matrix(7, 4, rng));
  const ad::Segments qs{{2, 3}};
  const ad::Segments ks{{3, 4}};
  for (Index heads : {1, 2, 4}) {
    CHECK(check(l, [&](ad::Tape& t) {
            return project(ad::segmented_attention(t.param(q), t.param(k), t.param(v), heads, qs, ks, 2.0));
          }) < kGradTol);
  }
}

TEST_CASE("segmented attention equals composed attention per set and head") {
  Rng rng(7);
  const Matrix q = random_matrix(5, 4, rng);
  const Matrix k = random_matrix(7, 4, rng);
  const Matrix v = random_matrix(7, 4, rng);
  ad::Tape t;
  const auto fused = ad::segmented_attention(t.constant(q), t.constant(k), t.constant(v), 2,
                                             ad::Segments{{2, 3}}, ad::Segments{{3, 4}}, 2.0);
  Matrix expected(5, 4);
  const Index q_off[] = {0, 2}, q_len[] = {2, 3}, k_off[] = {0, 3}, k_len[] = {3, 4};
  for (int s = 0; s < 2; ++s) {
    for (int h = 0; h < 2; ++h) {
      const auto qh = t.constant(q.block(q_off[s], 2 * h, q_len[s], 2));
      const auto kh = t.constant(k.block(k_off[s], 2 * h, k_len[s], 2));
      const auto vh = t.constant(v.block(k_off[s], 2 * h, k_len[s], 2));
      expected.block(q_off[s], 2 * h, q_len[s], 2) = ad::att(qh, kh, vh, 2.0).value();
    }
  }
  CHECK(relative_error(fused.value(), expected) < 1e-14);
}

TEST_CASE("tape rejects misuse") {
  ad::Tape t;
  const auto x = t.constant(Matrix::Ones(2, 2));
  CHECK_THROWS_AS(t.backward(x), ContractError);
  CHECK_THROWS_AS(ad::matmul(x, t.constant(Matrix::Ones(3, 1))), DimensionError);
  CHECK_THROWS_AS(ad::add(x, t.constant(Matrix::Ones(2, 3))), DimensionError);
}

TEST_CASE("gradients accumulate across uses of one parameter") {
  Parameter p("p", Matrix::Constant(1, 1, 3.0));
  ad::Tape t;
  const auto a = t.param(p);
  const auto b = t.param(p);
  CHECK(a.id() == b.id());
  t.backward(ad::sum(ad::add(ad::scale(a, 2.0), b)));
  CHECK(p.grad(0, 0) == doctest::Approx(3.0));
}

TEST_CASE("grad-disabled tape computes the same values") {
  Rng rng(8);
  const Matrix x = random_matrix(4, 4, rng);
  ad::Tape on, off;
  off.set_grad_enabled(false);
  const auto y_on = ad::softmax_rows(ad::matmul(on.constant(x), on.constant(x)), 2.0);
  const auto y_off = ad::softmax_rows(ad::matmul(off.constant(x), off.constant(x)), 2.0);
  CHECK(relative_error(y_on.value(), y_off.value()) == 0.0);
  CHECK_FALSE(off.requires_grad(y_off));
}

TEST_CASE("gradient check detects a wrong adjoint") {
  Parameter p("p", Matrix::Constant(2, 2, 0.5));
  std::vector<Parameter*> params{&p};
  auto wrong_square = [&](ad::Tape& t) {
    const auto x = t.param(p);
    const Matrix value = x.value().array().square().matrix();
    const auto y = t.record(value, "bad_square", {x}, [x](ad::Tape& tape, const Matrix&, const Matrix& g) {
      tape.accumulate(x, (-2.0 * x.value().array() * g.array()).matrix());
    });
    return ad::sum(y);
  };
  CHECK(finite_diff_check(wrong_square, params).max_rel_error > 0.5);
}

TEST_CASE("fused affine matches finite differences and the composed ops") {
  Rng rng(9);
  Leaves l;
  auto& x = l.add(away_from_zero(random_matrix(5, 3, rng)));
  auto& w = l.add(random_matrix(3, 4, rng));
  auto& b = l.add(random_matrix(1, 4, rng));
  for (bool relu : {false, true}) {
    CHECK(check(l, [&](ad::Tape& t) { return project(ad::affine(t.param(x), t.param(w), t.param(b), relu)); }) < kGradTol);
    ad::Tape t;
    const auto fused = ad::affine(t.param(x), t.param(w), t.param(b), relu);
    auto composed = ad::add_row(ad::matmul(t.param(x), t.param(w)), t.param(b));
    if (relu) composed = ad::relu(composed);
    CHECK(relative_error(fused.value(), composed.value()) < 1e-15);
  }
}
