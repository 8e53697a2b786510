#pragma once

#include "settx/tensor.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace settx {

/// Keeps large matrix buffers on the heap free lists instead of returning
/// them to the OS after every pass, so repeated forward passes do not pay
/// for fresh zeroed pages. No-op outside glibc. Called by run_bench.
void retain_freed_memory();

enum class BenchBlock { Sab, Isab };

std::string to_string(BenchBlock block);
BenchBlock parse_bench_block(const std::string& text);

/// Forward timing of one block on an all-zero n x input_dim set.
struct BenchConfig {
  BenchBlock block = BenchBlock::Sab;
  Index inducing = 16;  // isab only
  std::vector<Index> sizes;
  int reps = 5;
  int warmups = 2;
  Index input_dim = 3;
  Index dim = 64;
  Index heads = 8;
  std::uint64_t seed = 0;

  /// Throws ContractError: at least two strictly increasing sizes, reps >= 5.
  void validate() const;
};

struct BenchRow {
  Index n = 0;
  bool failed = false;
  std::string error;
  std::vector<double> seconds;  // one per measured repetition
  double median = 0.0;
  double p10 = 0.0;
  double p90 = 0.0;
};

struct BenchReport {
  BenchConfig config;
  std::vector<BenchRow> rows;
  /// Least-squares slope of log(median) on log(n) over the sizes that ran;
  /// NaN with fewer than two.
  double slope = 0.0;
};

/// Linear-interpolated quantile, q in [0, 1].
double quantile(std::vector<double> values, double q);

/// Least-squares slope of log(y) against log(x).
double loglog_slope(std::span<const double> x, std::span<const double> y);

using BenchProgress = std::function<void(const BenchRow&)>;

/// Runs every size; a size that throws (typically std::bad_alloc) is marked
/// failed and the remaining sizes still run.
BenchReport run_bench(const BenchConfig& config, const BenchProgress& progress = {});

inline constexpr const char* kBenchHeader = "block,n,m,rep,seconds";

/// Raw timings, one row per repetition. Failed sizes get a single row with
/// rep -1 and an empty seconds field.
void write_bench_csv(std::ostream& out, const BenchReport& report);

}  // namespace settx
