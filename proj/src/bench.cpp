#include "settx/bench.hpp"

#include "settx/blocks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <ostream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace settx {

void retain_freed_memory() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

std::string to_string(BenchBlock block) { return block == BenchBlock::Sab ? "sab" : "isab"; }

BenchBlock parse_bench_block(const std::string& text) {
  if (text == "sab") return BenchBlock::Sab;
  if (text == "isab") return BenchBlock::Isab;
  throw ContractError("unknown block '" + text + "' (expected sab or isab)");
}

void BenchConfig::validate() const {
  if (sizes.size() < 2) throw ContractError("bench: need at least two sizes");
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (sizes[i] < 1) throw ContractError("bench: sizes must be positive");
    if (i > 0 && sizes[i] <= sizes[i - 1]) throw ContractError("bench: sizes must be strictly increasing");
  }
  if (reps < 5) throw ContractError("bench: need at least 5 repetitions");
  if (warmups < 0) throw ContractError("bench: negative warmup count");
  if (block == BenchBlock::Isab && inducing < 1) throw ContractError("bench: m must be >= 1");
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ContractError("quantile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

double loglog_slope(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DimensionError("loglog_slope: length mismatch");
  if (x.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

BenchReport run_bench(const BenchConfig& config, const BenchProgress& progress) {
  config.validate();
  retain_freed_memory();
  Rng rng(config.seed);
  ParameterStore store;
  std::optional<MABParams> sab;
  std::optional<ISABParams> isab;
  if (config.block == BenchBlock::Sab) {
    sab = make_mab(store, "sab", config.input_dim, config.input_dim, config.dim, config.heads, rng);
  } else {
    isab = make_isab(store, "isab", config.input_dim, config.dim, config.heads, config.inducing, rng);
  }

  BenchReport report;
  report.config = config;
  std::vector<double> ok_n, ok_t;
  for (Index n : config.sizes) {
    BenchRow row;
    row.n = n;
    try {
      const Matrix x = Matrix::Zero(n, config.input_dim);
      auto once = [&] {
        ad::Tape tape;
        tape.set_grad_enabled(false);
        const auto start = std::chrono::steady_clock::now();
        const ad::Var in = tape.constant(x);
        const ad::Var out = sab ? ad::sab(in, *sab) : ad::isab(in, *isab);
        const double checksum = out.value()(0, 0);
        const auto stop = std::chrono::steady_clock::now();
        if (!std::isfinite(checksum)) throw std::runtime_error("non-finite block output");
        return std::chrono::duration<double>(stop - start).count();
      };
      for (int w = 0; w < config.warmups; ++w) once();
      for (int r = 0; r < config.reps; ++r) row.seconds.push_back(once());
      row.median = quantile(row.seconds, 0.5);
      row.p10 = quantile(row.seconds, 0.1);
      row.p90 = quantile(row.seconds, 0.9);
      ok_n.push_back(static_cast<double>(n));
      ok_t.push_back(row.median);
    } catch (const std::bad_alloc&) {
      row.failed = true;
      row.error = "out of memory";
      row.seconds.clear();
    } catch (const std::exception& e) {
      row.failed = true;
      row.error = e.what();
      row.seconds.clear();
    }
    if (progress) progress(row);
    report.rows.push_back(std::move(row));
  }
  report.slope = loglog_slope(ok_n, ok_t);
  return report;
}

void write_bench_csv(std::ostream& out, const BenchReport& report) {
  const auto old_precision = out.precision(9);
  const std::string block = to_string(report.config.block);
  const Index m = report.config.block == BenchBlock::Isab ? report.config.inducing : 0;
  for (const auto& row : report.rows) {
    if (row.failed) {
      out << block << ',' << row.n << ',' << m << ",-1,\n";
      continue;
    }
    for (std::size_t r = 0; r < row.seconds.size(); ++r) {
      out << block << ',' << row.n << ',' << m << ',' << r << ',' << row.seconds[r] << '\n';
    }
  }
  out.precision(old_precision);
}

}  // namespace settx
