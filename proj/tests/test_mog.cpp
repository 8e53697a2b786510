#include "helpers.hpp"
#include "settx/binary_io.hpp"
#include "settx/data.hpp"
#include "settx/gradcheck.hpp"
#include "settx/mog.hpp"

#include <doctest.h>

#include <cmath>
#include <sstream>

using namespace settx;
using settx::testing::random_matrix;

namespace {

MoGParams random_mixture(Index k, Index d, Rng& rng) {
  MoGParams theta;
  theta.weights = Vector(k);
  for (Index j = 0; j < k; ++j) theta.weights(j) = 0.2 + rng.uniform();
  theta.weights /= theta.weights.sum();
  theta.means = random_matrix(k, d, rng, 2.0);
  theta.scales = (random_matrix(k, d, rng).array().abs() + 0.3).matrix();
  return theta;
}

// Direct density evaluation in extended precision.
long double brute_loglik(const Matrix& x, const MoGParams& theta) {
  const long double pi = 3.141592653589793238462643383279502884L;
  long double total = 0;
  for (Index i = 0; i < x.rows(); ++i) {
    long double density = 0;
    for (Index j = 0; j < theta.components(); ++j) {
      long double comp = theta.weights(j);
      for (Index c = 0; c < x.cols(); ++c) {
        const long double s = theta.scales(j, c);
        const long double z = (x(i, c) - theta.means(j, c)) / s;
        comp *= std::exp(-0.5L * z * z) / (s * std::sqrt(2 * pi));
      }
      density += comp;
    }
    total += std::log(density);
  }
  return total / static_cast<long double>(x.rows());
}

// Textbook EM step written out separately, in extended precision.
struct WideMixture {
  std::vector<long double> w;
  std::vector<std::vector<long double>> mu, var;
};

WideMixture brute_em(const Matrix& x, const MoGParams& theta) {
  const Index n = x.rows(), k = theta.components(), d = x.cols();
  const long double pi = 3.141592653589793238462643383279502884L;
  std::vector<std::vector<long double>> r(static_cast<std::size_t>(n), std::vector<long double>(static_cast<std::size_t>(k)));
  for (Index i = 0; i < n; ++i) {
    long double norm = 0;
    for (Index j = 0; j < k; ++j) {
      long double p = theta.weights(j);
      for (Index c = 0; c < d; ++c) {
        const long double s = theta.scales(j, c);
        const long double z = (x(i, c) - theta.means(j, c)) / s;
        p *= std::exp(-0.5L * z * z) / (s * std::sqrt(2 * pi));
      }
      r[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = p;
      norm += p;
    }
    for (auto& v : r[static_cast<std::size_t>(i)]) v /= norm;
  }
  WideMixture out;
  for (Index j = 0; j < k; ++j) {
    long double mass = 0;
    std::vector<long double> mu(static_cast<std::size_t>(d), 0), var(static_cast<std::size_t>(d), 0);
    for (Index i = 0; i < n; ++i) mass += r[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    for (Index c = 0; c < d; ++c) {
      for (Index i = 0; i < n; ++i) mu[static_cast<std::size_t>(c)] += r[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] * x(i, c);
      mu[static_cast<std::size_t>(c)] /= mass;
      for (Index i = 0; i < n; ++i) {
        const long double e = x(i, c) - mu[static_cast<std::size_t>(c)];
        var[static_cast<std::size_t>(c)] += r[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] * e * e;
      }
      var[static_cast<std::size_t>(c)] /= mass;
    }
    out.w.push_back(mass / static_cast<long double>(n));
    out.mu.push_back(mu);
    out.var.push_back(var);
  }
  return out;
}

// Pair counting straight from the definition.
double brute_ari(const std::vector<int>& a, const std::vector<int>& b) {
  const std::size_t n = a.size();
  double both = 0, in_a = 0, in_b = 0, pairs = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const bool sa = a[i] == a[j], sb = b[i] == b[j];
      both += sa && sb;
      in_a += sa;
      in_b += sb;
      pairs += 1;
    }
  }
  const double expected = in_a * in_b / pairs;
  const double maximum = 0.5 * (in_a + in_b);
  return (both - expected) / (maximum - expected);
}

}  // namespace

TEST_CASE("mixture log-likelihood matches direct density evaluation") {
  Rng rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    const Index k = rng.uniform_int(1, 5), d = rng.uniform_int(1, 3);
    const MoGParams theta = random_mixture(k, d, rng);
    const Matrix x = random_matrix(rng.uniform_int(1, 50), d, rng, 2.0);
    const double got = mog_loglik(x, theta).per_datum;
    CHECK(std::abs(got - static_cast<double>(brute_loglik(x, theta))) < 1e-12 * std::max(1.0, std::abs(got)));
  }
}

TEST_CASE("log-likelihood stays finite far from every component") {
  MoGParams theta;
  theta.weights = Vector::Constant(2, 0.5);
  theta.means = Matrix::Zero(2, 2);
  theta.scales = Matrix::Constant(2, 2, 1e-3);
  const Matrix x = Matrix::Constant(1, 2, 50.0);
  CHECK(std::isfinite(mog_loglik(x, theta).total));
}

TEST_CASE("EM step equals the textbook update") {
  Rng rng(32);
  for (int trial = 0; trial < 5; ++trial) {
    const Index k = rng.uniform_int(1, 4), d = rng.uniform_int(1, 3);
    const MoGParams theta = random_mixture(k, d, rng);
    const Matrix x = random_matrix(rng.uniform_int(10, 60), d, rng, 2.0);
    const MoGParams next = em_step(x, theta).params;
    const WideMixture ref = brute_em(x, theta);
    for (Index j = 0; j < k; ++j) {
      CHECK(next.weights(j) == doctest::Approx(static_cast<double>(ref.w[static_cast<std::size_t>(j)])).epsilon(1e-12));
      for (Index c = 0; c < d; ++c) {
        const auto jj = static_cast<std::size_t>(j), cc = static_cast<std::size_t>(c);
        CHECK(next.means(j, c) == doctest::Approx(static_cast<double>(ref.mu[jj][cc])).epsilon(1e-10));
        CHECK(next.scales(j, c) == doctest::Approx(std::sqrt(static_cast<double>(ref.var[jj][cc]))).epsilon(1e-10));
      }
    }
  }
}

TEST_CASE("EM never decreases the likelihood") {
  Rng rng(33);
  for (int trial = 0; trial < 20; ++trial) {
    const MoGDataset ds = gen_synthetic_mog(rng, MogGenConfig{});
    MoGParams theta = random_mixture(4, 2, rng);
    double ll = mog_loglik(ds.points, theta).per_datum;
    for (int it = 0; it < 10; ++it) {
      theta = em_step(ds.points, theta).params;
      const double next = mog_loglik(ds.points, theta).per_datum;
      CHECK(next >= ll - 1e-9);
      ll = next;
    }
  }
}

TEST_CASE("EM leaves a component without responsibility untouched") {
  MoGParams theta;
  theta.weights = Vector::Constant(2, 0.5);
  theta.means = Matrix(2, 1);
  theta.means << 0.0, 1e6;
  theta.scales = Matrix::Constant(2, 1, 1.0);
  Rng rng(34);
  const Matrix x = random_matrix(20, 1, rng);
  const auto r = em_step(x, theta);
  CHECK(r.empty[1]);
  CHECK_FALSE(r.empty[0]);
  CHECK(r.params.means(1, 0) == 1e6);
  CHECK(r.params.weights.sum() == doctest::Approx(1.0));
  CHECK(r.params.weights(1) > 0.0);
}

TEST_CASE("EM floors variances of collapsed components") {
  MoGParams theta;
  theta.weights = Vector::Constant(1, 1.0);
  theta.means = Matrix::Zero(1, 2);
  theta.scales = Matrix::Ones(1, 2);
  const Matrix x = Matrix::Constant(5, 2, 3.0);
  const auto r = em_step(x, theta);
  CHECK(r.params.scales.minCoeff() == doctest::Approx(kSigmaFloor));
}

TEST_CASE("cluster assignment picks the most probable component") {
  MoGParams theta;
  theta.weights = Vector::Constant(2, 0.5);
  theta.means = Matrix(2, 1);
  theta.means << -1.0, 1.0;
  theta.scales = Matrix::Ones(2, 1);
  Matrix x(3, 1);
  x << -2.0, 0.0, 2.0;
  const auto labels = assign_clusters(x, theta);
  CHECK(labels == std::vector<int>{0, 0, 1});  // tie at 0 goes to the lower index
}

TEST_CASE("mog head returns a valid mixture for any finite input") {
  Rng rng(35);
  for (double spread : {1e-3, 1.0, 1e3}) {
    const MoGParams theta = mog_head(random_matrix(4, 5, rng, spread));
    CHECK(theta.weights.sum() == doctest::Approx(1.0).epsilon(1e-14));
    CHECK((theta.weights.array() >= 0.0).all());
    CHECK((theta.scales.array() >= kSigmaFloor).all());
    CHECK(theta.scales.allFinite());
  }
  CHECK_THROWS_AS(mog_head(Matrix::Zero(2, 4)), DimensionError);
}

TEST_CASE("average log-likelihood node matches the closed form and finite differences") {
  Rng rng(36);
  Parameter raw("raw", random_matrix(3, 5, rng));
  const Matrix x = random_matrix(40, 2, rng, 2.0);
  ad::Tape t;
  const double v = ad::mog_average_loglik(t.param(raw), x).value()(0, 0);
  CHECK(v == doctest::Approx(mog_loglik(x, mog_head(raw.value)).per_datum).epsilon(1e-14));
  std::vector<Parameter*> params{&raw};
  CHECK(finite_diff_check([&](ad::Tape& tape) { return ad::mog_average_loglik(tape.param(raw), x); }, params)
            .max_rel_error < 1e-6);
}

TEST_CASE("ARI matches pair counting and known values") {
  CHECK(adjusted_rand_index(std::vector<int>{0, 0, 1, 1}, std::vector<int>{0, 0, 1, 2}) ==
        doctest::Approx(4.0 / 7.0));
  CHECK(adjusted_rand_index(std::vector<int>{0, 0, 1, 1}, std::vector<int>{1, 1, 0, 0}) == 1.0);
  CHECK(adjusted_rand_index(std::vector<int>{0, 0, 0}, std::vector<int>{0, 0, 0}) == 1.0);
  Rng rng(37);
  for (int trial = 0; trial < 30; ++trial) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(3, 80));
    std::vector<int> a(n), b(n);
    for (auto& v : a) v = static_cast<int>(rng.uniform_int(0, 3));
    for (auto& v : b) v = static_cast<int>(rng.uniform_int(0, 4));
    const double expect = brute_ari(a, b);
    if (!std::isfinite(expect)) continue;
    CHECK(adjusted_rand_index(a, b) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(adjusted_rand_index(a, b) == adjusted_rand_index(b, a));
    std::vector<int> relabeled = a;
    for (auto& v : relabeled) v = 7 - 2 * v;
    CHECK(adjusted_rand_index(relabeled, b) == doctest::Approx(adjusted_rand_index(a, b)).epsilon(1e-14));
  }
  CHECK_THROWS_AS(adjusted_rand_index(std::vector<int>{0}, std::vector<int>{0, 1}), DimensionError);
}

TEST_CASE("mixture generator follows its distribution") {
  Rng rng(38);
  const MogGenConfig cfg;
  double weight_sum = 0, weight_sq = 0, resid_sq = 0, resid_n = 0, mean_sum = 0;
  const int datasets = 400;
  for (int s = 0; s < datasets; ++s) {
    const MoGDataset ds = gen_synthetic_mog(rng, cfg);
    const Index n = ds.points.rows();
    REQUIRE(n >= cfg.n_min);
    REQUIRE(n <= cfg.n_max);
    REQUIRE(ds.labels.size() == static_cast<std::size_t>(n));
    CHECK(ds.truth.weights.sum() == doctest::Approx(1.0));
    CHECK(ds.truth.means.minCoeff() >= cfg.mu_min);
    CHECK(ds.truth.means.maxCoeff() <= cfg.mu_max);
    CHECK((ds.truth.scales.array() == cfg.sigma).all());
    weight_sum += ds.truth.weights(0);
    weight_sq += ds.truth.weights(0) * ds.truth.weights(0);
    mean_sum += ds.truth.means(0, 0);
    for (Index i = 0; i < n; ++i) {
      const int l = ds.labels[static_cast<std::size_t>(i)];
      REQUIRE(l >= 0);
      REQUIRE(l < cfg.k);
      resid_sq += (ds.points.row(i) - ds.truth.means.row(l)).squaredNorm();
      resid_n += static_cast<double>(cfg.dims);
    }
  }
  // Dirichlet(1) over 4 components: E[w] = 1/4, E[w^2] = 2/(k(k+1)) = 0.1.
  CHECK(std::abs(weight_sum / datasets - 0.25) < 4 * std::sqrt(0.0375 / datasets));
  CHECK(std::abs(weight_sq / datasets - 0.1) < 0.015);
  CHECK(std::abs(mean_sum / datasets) < 4 * std::sqrt(64.0 / 12.0 / datasets));
  CHECK(std::sqrt(resid_sq / resid_n) == doctest::Approx(cfg.sigma).epsilon(0.01));
}

TEST_CASE("max regression batches hold exact maxima") {
  Rng rng(39);
  const MaxRegressionConfig cfg;
  for (int trial = 0; trial < 20; ++trial) {
    const auto batch = gen_max_regression(rng, 16, cfg);
    REQUIRE(batch.segments.count() == 16);
    const Index n = batch.segments.sizes[0];
    CHECK(n >= cfg.n_min);
    CHECK(n <= cfg.n_max);
    for (std::size_t s = 0; s < batch.segments.count(); ++s) {
      CHECK(batch.segments.sizes[s] == n);
      const auto block = batch.values.middleRows(static_cast<Index>(s) * n, n);
      CHECK(batch.targets(static_cast<Index>(s), 0) == block.maxCoeff());
      CHECK(block.minCoeff() >= 0.0);
      CHECK(block.maxCoeff() < cfg.value_max);
    }
  }
}

TEST_CASE("dataset files round-trip and reject corruption") {
  Rng rng(40);
  const MoGDataset ds = gen_synthetic_mog(rng, MogGenConfig{}, 57);
  std::stringstream buf;
  write_dataset(buf, ds);
  const std::string bytes = buf.str();
  std::stringstream in(bytes);
  const MoGDataset back = read_dataset(in);
  CHECK(back.points == ds.points);
  CHECK(back.labels == ds.labels);
  CHECK(back.truth.weights == ds.truth.weights);
  CHECK(back.truth.means == ds.truth.means);
  CHECK(back.truth.scales == ds.truth.scales);

  std::stringstream again;
  write_dataset(again, back);
  CHECK(again.str() == bytes);

  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(read_dataset(truncated), io::FormatError);
  std::string bad = bytes;
  bad[0] = 'X';
  std::stringstream bad_magic(bad);
  CHECK_THROWS_AS(read_dataset(bad_magic), io::FormatError);

  std::ostringstream csv;
  write_dataset_csv(csv, ds);
  CHECK(csv.str().rfind("x0,x1,label\n", 0) == 0);
}
