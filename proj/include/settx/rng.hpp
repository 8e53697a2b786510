#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace settx {

/// Deterministic random source.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the C++
/// standard. The standard distributions are not (their algorithms are
/// implementation-defined), so every transform below is written out here:
/// uniforms use the top 53 bits, normals use Box-Muller, exponentials use
/// inversion. The same seed therefore gives the same stream on any conforming
/// toolchain, up to libm rounding in log/cos/sin.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  /// Independent stream for worker or dataset `index` under a master seed.
  static Rng derive(std::uint64_t master, std::uint64_t index);

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer on the closed range [lo, hi], unbiased (rejection).
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

  double normal();
  double exponential();

  /// Index drawn with probability proportional to `weights`.
  std::size_t categorical(std::span<const double> weights);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  double cached_normal_ = 0.0;
  bool has_cached_normal_ = false;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace settx
