#pragma once

#include "settx/gradcheck.hpp"
#include "settx/model.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace settx {

/// Uniformly random permutation of 0..n-1 (Fisher-Yates).
std::vector<Index> random_permutation(Index n, Rng& rng);
/// Row i of the result is row perm[i] of x.
Matrix permute_rows(const Matrix& x, const std::vector<Index>& perm);

struct CheckCase {
  std::string suite;
  std::string name;
  double error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::uint64_t seed = 0;  // replays the case
  std::string detail;
};

struct CheckReport {
  std::vector<CheckCase> cases;
  bool passed() const;
  /// Largest error/tolerance ratio in a suite ("" for all).
  double worst_ratio(const std::string& suite = "") const;
};

/// Extra gradient case: builds a loss on the tape from the parameters it
/// creates in `leaves`, seeded from `rng`.
struct GradCase {
  std::string name;
  std::function<GradCheckResult(Rng& rng)> run;
};

struct CheckOptions {
  std::uint64_t seed = 0;
  int permutations = 100;
  int architectures = 5;
  int grad_trials = 3;
  std::vector<GradCase> extra_grad_cases;
  /// Trained models whose invariance is re-checked by the perm suite.
  std::vector<const Model*> models;
};

inline constexpr const char* kCheckSuites[] = {"grad", "perm", "lemma", "em"};

/// suite is one of grad, perm, lemma, em, all.
CheckReport run_checks(const std::string& suite, const CheckOptions& options = {});

CheckReport check_gradients(const CheckOptions& options);
CheckReport check_permutations(const CheckOptions& options);
CheckReport check_lemmas(const CheckOptions& options);
CheckReport check_mixture(const CheckOptions& options);

/// Random small architecture for the invariance suite.
ModelConfig random_architecture(Rng& rng);

}  // namespace settx
