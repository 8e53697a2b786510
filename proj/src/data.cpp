#include "settx/data.hpp"

#include "settx/binary_io.hpp"

#include <fstream>
#include <ostream>

namespace settx {

MaxRegressionBatch gen_max_regression(Rng& rng, Index batch_size, const MaxRegressionConfig& cfg) {
  if (batch_size <= 0) throw ContractError("gen_max_regression: batch size must be positive");
  const Index n = rng.uniform_int(cfg.n_min, cfg.n_max);
  MaxRegressionBatch batch;
  batch.values.resize(batch_size * n, 1);
  batch.targets.resize(batch_size, 1);
  for (Index s = 0; s < batch_size; ++s) {
    double top = -std::numeric_limits<double>::infinity();
    for (Index i = 0; i < n; ++i) {
      const double v = rng.uniform(0.0, cfg.value_max);
      batch.values(s * n + i, 0) = v;
      top = std::max(top, v);
    }
    batch.targets(s, 0) = top;
  }
  batch.segments = ad::Segments::uniform(static_cast<std::size_t>(batch_size), n);
  return batch;
}

MoGDataset gen_synthetic_mog(Rng& rng, const MogGenConfig& cfg, std::optional<Index> n_fixed) {
  if (cfg.k < 1) throw ContractError("gen_synthetic_mog: k must be >= 1");
  if (cfg.n_min < 1 || cfg.n_max < cfg.n_min) throw ContractError("gen_synthetic_mog: empty n range");
  const Index n = n_fixed ? *n_fixed : rng.uniform_int(cfg.n_min, cfg.n_max);
  const Index k = cfg.k;
  const Index dims = cfg.dims;

  MoGDataset data;
  data.truth.means.resize(k, dims);
  for (Index j = 0; j < k; ++j) {
    for (Index c = 0; c < dims; ++c) data.truth.means(j, c) = rng.uniform(cfg.mu_min, cfg.mu_max);
  }
  // Dirichlet(1, ..., 1) as normalized unit exponentials.
  data.truth.weights.resize(k);
  for (Index j = 0; j < k; ++j) data.truth.weights(j) = rng.exponential();
  data.truth.weights /= data.truth.weights.sum();
  data.truth.scales = Matrix::Constant(k, dims, cfg.sigma);

  data.points.resize(n, dims);
  data.labels.resize(static_cast<std::size_t>(n));
  const std::span<const double> weights(data.truth.weights.data(), static_cast<std::size_t>(k));
  for (Index i = 0; i < n; ++i) {
    const auto z = static_cast<Index>(rng.categorical(weights));
    data.labels[static_cast<std::size_t>(i)] = static_cast<int>(z);
    for (Index c = 0; c < dims; ++c) {
      data.points(i, c) = data.truth.means(z, c) + cfg.sigma * rng.normal();
    }
  }
  return data;
}

void write_dataset(std::ostream& out, const MoGDataset& data) {
  const Index n = data.points.rows();
  const Index dims = data.points.cols();
  const Index k = data.truth.components();
  io::write_bytes(out, "MOGD");
  io::write_le<std::uint32_t>(out, kDatasetVersion);
  io::write_le<std::uint64_t>(out, static_cast<std::uint64_t>(n));
  io::write_le<std::uint64_t>(out, static_cast<std::uint64_t>(dims));
  io::write_le<std::uint64_t>(out, static_cast<std::uint64_t>(k));
  for (Index i = 0; i < data.points.size(); ++i) io::write_le(out, data.points.data()[i]);
  for (int label : data.labels) io::write_le<std::int64_t>(out, label);
  for (Index j = 0; j < k; ++j) io::write_le(out, data.truth.weights(j));
  for (Index i = 0; i < data.truth.means.size(); ++i) io::write_le(out, data.truth.means.data()[i]);
  for (Index i = 0; i < data.truth.scales.size(); ++i) io::write_le(out, data.truth.scales.data()[i]);
}

MoGDataset read_dataset(std::istream& in) {
  if (io::read_bytes(in, 4, "magic") != "MOGD") throw io::FormatError("bad dataset magic");
  const auto version = io::read_le<std::uint32_t>(in, "version");
  if (version != kDatasetVersion) {
    throw io::FormatError("unsupported dataset version " + std::to_string(version));
  }
  const auto n = io::read_le<std::uint64_t>(in, "n");
  const auto dims = io::read_le<std::uint64_t>(in, "D");
  const auto k = io::read_le<std::uint64_t>(in, "k");
  constexpr std::uint64_t kLimit = 1ULL << 28;
  if (n > kLimit || dims == 0 || dims > 4096 || k == 0 || k > 4096 || n * dims > kLimit) {
    throw io::FormatError("implausible dataset header (n, D, k)");
  }
  MoGDataset data;
  data.points.resize(static_cast<Index>(n), static_cast<Index>(dims));
  for (Index i = 0; i < data.points.size(); ++i) data.points.data()[i] = io::read_le<double>(in, "points");
  data.labels.resize(n);
  for (auto& label : data.labels) {
    const auto v = io::read_le<std::int64_t>(in, "labels");
    if (v < 0 || static_cast<std::uint64_t>(v) >= k) throw io::FormatError("label out of range");
    label = static_cast<int>(v);
  }
  data.truth.weights.resize(static_cast<Index>(k));
  for (Index j = 0; j < data.truth.weights.size(); ++j) data.truth.weights(j) = io::read_le<double>(in, "weights");
  data.truth.means.resize(static_cast<Index>(k), static_cast<Index>(dims));
  for (Index i = 0; i < data.truth.means.size(); ++i) data.truth.means.data()[i] = io::read_le<double>(in, "means");
  data.truth.scales.resize(static_cast<Index>(k), static_cast<Index>(dims));
  for (Index i = 0; i < data.truth.scales.size(); ++i) data.truth.scales.data()[i] = io::read_le<double>(in, "scales");
  return data;
}

void save_dataset(const std::filesystem::path& path, const MoGDataset& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io::FormatError("cannot write " + path.string());
  write_dataset(out, data);
}

MoGDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io::FormatError("cannot read " + path.string());
  return read_dataset(in);
}

void write_dataset_csv(std::ostream& out, const MoGDataset& data) {
  const auto old_precision = out.precision(17);
  for (Index c = 0; c < data.points.cols(); ++c) out << 'x' << c << ',';
  out << "label\n";
  for (Index i = 0; i < data.points.rows(); ++i) {
    for (Index c = 0; c < data.points.cols(); ++c) out << data.points(i, c) << ',';
    out << data.labels[static_cast<std::size_t>(i)] << '\n';
  }
  out.precision(old_precision);
}

}  // namespace settx
