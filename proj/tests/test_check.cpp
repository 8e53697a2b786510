#include "helpers.hpp"
#include "settx/check.hpp"
#include "settx/gradcheck.hpp"

#include <doctest.h>

#include <algorithm>

using namespace settx;
using settx::testing::random_matrix;

TEST_CASE("every suite passes at the default seed") {
  for (const char* suite : kCheckSuites) {
    const CheckReport report = run_checks(suite);
    CHECK_MESSAGE(report.passed(), suite);
    CHECK(report.worst_ratio(suite) <= 1.0);
    CHECK_FALSE(report.cases.empty());
  }
  CHECK_THROWS_AS(run_checks("nope"), ContractError);
}

TEST_CASE("perm suite runs the documented number of permutations per architecture") {
  CheckOptions options;
  const CheckReport report = check_permutations(options);
  int models = 0;
  for (const auto& c : report.cases) {
    if (c.name.rfind("model[", 0) == 0) {
      ++models;
      CHECK(c.detail.find("100 permutations") != std::string::npos);
    }
  }
  CHECK(models == 5);
}

TEST_CASE("a sign-flipped adjoint fails the grad suite and is named") {
  CheckOptions options;
  options.extra_grad_cases.push_back({"flipped_matmul", [](Rng& rng) {
    Parameter a("a", random_matrix(3, 4, rng));
    Parameter b("b", random_matrix(4, 2, rng));
    std::vector<Parameter*> params{&a, &b};
    auto f = [&](ad::Tape& t) {
      const auto x = t.param(a), y = t.param(b);
      const auto out = t.record(x.value() * y.value(), "flipped_matmul", {x, y},
                                [x, y](ad::Tape& tape, const Matrix&, const Matrix& g) {
                                  tape.accumulate(x, -(g * y.value().transpose()));
                                  tape.accumulate(y, x.value().transpose() * g);
                                });
      return ad::sum(out);
    };
    return finite_diff_check(f, params);
  }});
  const CheckReport report = check_gradients(options);
  CHECK_FALSE(report.passed());
  const auto failing = std::find_if(report.cases.begin(), report.cases.end(), [](const CheckCase& c) { return !c.passed; });
  REQUIRE(failing != report.cases.end());
  CHECK(failing->name == "flipped_matmul");
  CHECK(failing->detail.find("worst parameter a") != std::string::npos);
  CHECK(std::count_if(report.cases.begin(), report.cases.end(), [](const CheckCase& c) { return !c.passed; }) == 1);
}

TEST_CASE("random architectures are valid and varied") {
  Rng rng(71);
  std::vector<std::string> pools;
  for (int i = 0; i < 40; ++i) {
    const ModelConfig cfg = random_architecture(rng);
    CHECK_NOTHROW(cfg.validate());
    KeyValues kv;
    cfg.to(kv);
    pools.push_back(kv.require("model.pool"));
  }
  std::sort(pools.begin(), pools.end());
  pools.erase(std::unique(pools.begin(), pools.end()), pools.end());
  CHECK(pools.size() >= 4);
}

TEST_CASE("permutation helpers") {
  Rng rng(72);
  auto perm = random_permutation(10, rng);
  auto sorted = perm;
  std::sort(sorted.begin(), sorted.end());
  for (Index i = 0; i < 10; ++i) CHECK(sorted[static_cast<std::size_t>(i)] == i);
  const Matrix x = random_matrix(10, 2, rng);
  const Matrix px = permute_rows(x, perm);
  for (Index i = 0; i < 10; ++i) CHECK(px.row(i) == x.row(perm[static_cast<std::size_t>(i)]));
  CHECK_THROWS_AS(permute_rows(x, std::vector<Index>{0, 1}), DimensionError);
}
