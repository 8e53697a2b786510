#pragma once

#include "settx/autodiff.hpp"
#include "settx/mog.hpp"
#include "settx/rng.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>

namespace settx {

/// Minibatch for max-value regression. All sets in a batch share one size.
struct MaxRegressionBatch {
  Matrix values;   // (sets * set_size) x 1, sets stacked
  Matrix targets;  // sets x 1, exact maxima
  ad::Segments segments;
};

struct MaxRegressionConfig {
  Index n_min = 1;
  Index n_max = 10;
  double value_max = 100.0;
};

/// Draws n ~ Unif{n_min..n_max} once, then batch_size sets of n values from
/// Unif[0, value_max).
MaxRegressionBatch gen_max_regression(Rng& rng, Index batch_size,
                                      const MaxRegressionConfig& cfg = {});

/// Generative process for the synthetic mixture datasets.
struct MogGenConfig {
  Index k = 4;
  Index n_min = 100;
  Index n_max = 500;
  double mu_min = -4.0;
  double mu_max = 4.0;
  double sigma = 0.3;
  Index dims = 2;

  static MogGenConfig large_scale() {
    MogGenConfig c;
    c.k = 6;
    c.n_min = 1000;
    c.n_max = 5000;
    return c;
  }
};

struct MoGDataset {
  Matrix points;            // n x D
  std::vector<int> labels;  // 0-based component index per point
  MoGParams truth;
};

/// n ~ Unif{n_min..n_max} (unless given), means ~ Unif(mu_min, mu_max)^D,
/// weights ~ symmetric Dirichlet(1) over k, labels ~ Categorical(weights),
/// points ~ N(mean, sigma^2 I).
MoGDataset gen_synthetic_mog(Rng& rng, const MogGenConfig& cfg,
                             std::optional<Index> n = std::nullopt);

// Flat binary layout, all fields 64-bit little-endian:
//   "MOGD" | u32 version | u64 n | u64 D | u64 k
//   | f64 points[n*D] (row-major) | i64 labels[n]
//   | f64 weights[k] | f64 means[k*D] | f64 scales[k*D]
inline constexpr std::uint32_t kDatasetVersion = 1;

void write_dataset(std::ostream& out, const MoGDataset& data);
MoGDataset read_dataset(std::istream& in);
void save_dataset(const std::filesystem::path& path, const MoGDataset& data);
MoGDataset load_dataset(const std::filesystem::path& path);

/// `x0,...,x{D-1},label` per point.
void write_dataset_csv(std::ostream& out, const MoGDataset& data);

}  // namespace settx
