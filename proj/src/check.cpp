#include "settx/check.hpp"

#include "settx/kernels.hpp"
#include "settx/mog.hpp"
#include "settx/data.hpp"
#include "settx/training.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>

namespace settx {

std::vector<Index> random_permutation(Index n, Rng& rng) {
  std::vector<Index> perm(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
  for (Index i = n - 1; i > 0; --i) {
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(rng.uniform_int(0, i))]);
  }
  return perm;
}

Matrix permute_rows(const Matrix& x, const std::vector<Index>& perm) {
  if (static_cast<Index>(perm.size()) != x.rows()) throw DimensionError("permute_rows: length mismatch");
  Matrix out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) out.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
  return out;
}

bool CheckReport::passed() const {
  return std::all_of(cases.begin(), cases.end(), [](const CheckCase& c) { return c.passed; });
}

double CheckReport::worst_ratio(const std::string& suite) const {
  double worst = 0.0;
  for (const auto& c : cases) {
    if (!suite.empty() && c.suite != suite) continue;
    worst = std::max(worst, c.tolerance > 0 ? c.error / c.tolerance : (c.passed ? 0.0 : 1e300));
  }
  return worst;
}

namespace {

constexpr double kGradTol = 1e-6;
constexpr double kPermTol = 1e-9;
constexpr double kExactTol = 1e-12;
// A central difference with h = 1e-5 moves pre-activations by far less than
// this, so a draw with a larger margin never straddles a kink.
constexpr double kKinkMargin = 1e-3;
constexpr int kMaxRedraws = 50;

Matrix random_matrix(Index rows, Index cols, Rng& rng, double spread = 1.0) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = spread * rng.normal();
  return m;
}

// Keeps entries out of [-0.05, 0.05] so central differences do not straddle
// a ReLU or |x| kink.
Matrix away_from_zero(Matrix m) {
  for (Index i = 0; i < m.size(); ++i) {
    double& v = m.data()[i];
    if (std::abs(v) < 0.05) v += v < 0 ? -0.1 : 0.1;
  }
  return m;
}

ad::Var project(const ad::Var& out, std::uint64_t seed) {
  Rng rng(seed);
  const ad::Var flat = ad::reshape(out, 1, out.rows() * out.cols());
  return ad::matmul(flat, out.tape()->constant(random_matrix(flat.cols(), 1, rng)));
}

ad::Segments random_segments(Rng& rng, std::size_t count, Index lo, Index hi) {
  ad::Segments segs;
  for (std::size_t i = 0; i < count; ++i) segs.sizes.push_back(rng.uniform_int(lo, hi));
  return segs;
}

Index small(Rng& rng, Index lo = 1, Index hi = 8) { return rng.uniform_int(lo, hi); }

// LayerNorm over fewer than three features is constant in its input, which
// would leave the attention weights with identically zero gradients.
Index block_width(Rng& rng, Index heads) { return heads == 1 ? small(rng, 3, 8) : heads * small(rng, 2, 4); }

CheckCase make_case(const std::string& suite, const std::string& name, double error,
                    double tolerance, std::uint64_t seed, std::string detail = {}) {
  CheckCase c;
  c.suite = suite;
  c.name = name;
  c.error = error;
  c.tolerance = tolerance;
  c.passed = std::isfinite(error) && error <= tolerance;
  c.seed = seed;
  c.detail = std::move(detail);
  return c;
}

using Forward = std::function<ad::Var(ad::Tape&)>;

/// Gradient case over parameters it owns.
struct OpCase {
  std::string name;
  // Fills the store and returns the loss builder.
  std::function<Forward(ParameterStore&, Rng&)> setup;
};

std::vector<OpCase> op_cases() {
  auto leaf = [](ParameterStore& s, Matrix v) -> Parameter& {
    return s.add("p" + std::to_string(s.size()), std::move(v));
  };
  std::vector<OpCase> cases;
  auto binary = [&](const std::string& name, auto op) {
    cases.push_back({name, [leaf, op](ParameterStore& s, Rng& rng) -> Forward {
                       const Index r = small(rng), c = small(rng);
                       Parameter& a = leaf(s, random_matrix(r, c, rng));
                       Parameter& b = leaf(s, random_matrix(r, c, rng));
                       const auto seed = rng.next_u64();
                       return [&a, &b, op, seed](ad::Tape& t) { return project(op(t.param(a), t.param(b)), seed); };
                     }});
  };
  binary("add", [](const ad::Var& a, const ad::Var& b) { return ad::add(a, b); });
  binary("sub", [](const ad::Var& a, const ad::Var& b) { return ad::sub(a, b); });

  auto unary = [&](const std::string& name, auto op, bool kinks) {
    cases.push_back({name, [leaf, op, kinks](ParameterStore& s, Rng& rng) -> Forward {
                       Matrix v = random_matrix(small(rng), small(rng), rng, 2.0);
                       Parameter& a = leaf(s, kinks ? away_from_zero(v) : v);
                       const auto seed = rng.next_u64();
                       return [&a, op, seed](ad::Tape& t) { return project(op(t.param(a)), seed); };
                     }});
  };
  unary("scale", [](const ad::Var& a) { return ad::scale(a, -1.7); }, false);
  unary("transpose", [](const ad::Var& a) { return ad::transpose(a); }, false);
  unary("relu", [](const ad::Var& a) { return ad::relu(a); }, true);
  unary("abs", [](const ad::Var& a) { return ad::abs(a); }, true);
  unary("softmax_rows", [](const ad::Var& a) { return ad::softmax_rows(a, 1.3); }, false);
  unary("sum", [](const ad::Var& a) { return ad::sum(a); }, false);
  unary("mean", [](const ad::Var& a) { return ad::mean(a); }, false);
  unary("tile_rows", [](const ad::Var& a) { return ad::tile_rows(a, 3); }, false);
  unary("reshape", [](const ad::Var& a) { return ad::reshape(a, 1, a.rows() * a.cols()); }, false);
  unary("slice_rows", [](const ad::Var& a) { return ad::slice_rows(a, a.rows() / 2, a.rows() - a.rows() / 2); }, false);

  cases.push_back({"matmul", [leaf](ParameterStore& s, Rng& rng) -> Forward {
                     const Index r = small(rng), k = small(rng), c = small(rng);
                     Parameter& a = leaf(s, random_matrix(r, k, rng));
                     Parameter& b = leaf(s, random_matrix(k, c, rng));
                     const auto seed = rng.next_u64();
                     return [&a, &b, seed](ad::Tape& t) { return project(ad::matmul(t.param(a), t.param(b)), seed); };
                   }});
  cases.push_back({"mul_scalar", [leaf](ParameterStore& s, Rng& rng) -> Forward {
                     Parameter& a = leaf(s, random_matrix(small(rng), small(rng), rng));
                     Parameter& c = leaf(s, random_matrix(1, 1, rng));
                     const auto seed = rng.next_u64();
                     return [&a, &c, seed](ad::Tape& t) { return project(ad::mul_scalar(t.param(a), t.param(c)), seed); };
                   }});
  cases.push_back({"layernorm_rows", [leaf](ParameterStore& s, Rng& rng) -> Forward {
                     const Index r = small(rng), c = small(rng, 3, 8);
                     Parameter& x = leaf(s, random_matrix(r, c, rng, 2.0));
                     Parameter& g = leaf(s, random_matrix(1, c, rng));
                     Parameter& b = leaf(s, random_matrix(1, c, rng));
                     const auto seed = rng.next_u64();
                     return [&x, &g, &b, seed](ad::Tape& t) {
                       return project(ad::layernorm_rows(t.param(x), t.param(g), t.param(b), 1e-5), seed);
                     };
                   }});
  cases.push_back({"affine", [leaf](ParameterStore& s, Rng& rng) -> Forward {
                     const Index r = small(rng), k = small(rng), c = small(rng);
                     Parameter& x = leaf(s, away_from_zero(random_matrix(r, k, rng)));
                     Parameter& w = leaf(s, random_matrix(k, c, rng));
                     Parameter& b = leaf(s, random_matrix(1, c, rng));
                     const bool relu = rng.uniform() < 0.5;
                     const auto seed = rng.next_u64();
                     return [&x, &w, &b, relu, seed](ad::Tape& t) {
                       return project(ad::affine(t.param(x), t.param(w), t.param(b), relu), seed);
                     };
                   }});
  cases.push_back({"concat_split_cols", [leaf](ParameterStore& s, Rng& rng) -> Forward {
                     const Index r = small(rng), parts = small(rng, 1, 4);
                     Parameter& a = leaf(s, random_matrix(r, 2 * parts, rng));
                     Parameter& b = leaf(s, random_matrix(r, small(rng), rng));
                     const auto seed = rng.next_u64();
                     return [&a, &b, parts, seed](ad::Tape& t) {
                       auto pieces = ad::split_cols(t.param(a), parts);
                       std::reverse(pieces.begin(), pieces.end());
                       pieces.push_back(t.param(b));
                       return project(ad::concat_cols(pieces), seed);
                     };
                   }});
  cases.push_back({"concat_rows", [leaf](ParameterStore& s, Rng& rng) -> Forward {
                     const Index c = small(rng);
                     Parameter& a = leaf(s, random_matrix(small(rng), c, rng));
                     Parameter& b = leaf(s, random_matrix(small(rng), c, rng));
                     const auto seed = rng.next_u64();
                     return [&a, &b, seed](ad::Tape& t) { return project(ad::concat_rows({t.param(b), t.param(a)}), seed); };
                   }});
  cases.push_back({"broadcast_add_row", [leaf](ParameterStore& s, Rng& rng) -> Forward {
                     const Index r = small(rng), c = small(rng);
                     Parameter& x = leaf(s, random_matrix(r, c, rng));
                     Parameter& row = leaf(s, random_matrix(1, c, rng));
                     const auto seed = rng.next_u64();
                     return [&x, &row, r, seed](ad::Tape& t) {
                       return project(ad::add(ad::add_row(t.param(x), t.param(row)), ad::broadcast_row(t.param(row), r)), seed);
                     };
                   }});
  for (ad::Pool pool : {ad::Pool::Mean, ad::Pool::Sum, ad::Pool::Max}) {
    const std::string name = pool == ad::Pool::Mean ? "segment_pool_mean"
                             : pool == ad::Pool::Sum ? "segment_pool_sum"
                                                     : "segment_pool_max";
    cases.push_back({name, [leaf, pool](ParameterStore& s, Rng& rng) -> Forward {
                       const auto segs = random_segments(rng, static_cast<std::size_t>(small(rng, 1, 4)), 1, 6);
                       Parameter& x = leaf(s, random_matrix(segs.total(), small(rng), rng));
                       const auto seed = rng.next_u64();
                       return [&x, segs, pool, seed](ad::Tape& t) {
                         return project(ad::segment_pool(t.param(x), segs, pool), seed);
                       };
                     }});
  }
  cases.push_back({"segment_broadcast", [leaf](ParameterStore& s, Rng& rng) -> Forward {
                     const auto segs = random_segments(rng, static_cast<std::size_t>(small(rng, 1, 4)), 1, 6);
                     Parameter& rows = leaf(s, random_matrix(static_cast<Index>(segs.count()), small(rng), rng));
                     const auto seed = rng.next_u64();
                     return [&rows, segs, seed](ad::Tape& t) { return project(ad::segment_broadcast(t.param(rows), segs), seed); };
                   }});
  cases.push_back({"segmented_attention", [leaf](ParameterStore& s, Rng& rng) -> Forward {
                     const std::size_t count = static_cast<std::size_t>(small(rng, 1, 3));
                     const auto qs = random_segments(rng, count, 1, 5);
                     const auto ks = random_segments(rng, count, 1, 5);
                     const Index heads = small(rng, 1, 4);
                     const Index dk = heads * small(rng, 1, 2), dv = heads * small(rng, 1, 2);
                     Parameter& q = leaf(s, random_matrix(qs.total(), dk, rng));
                     Parameter& k = leaf(s, random_matrix(ks.total(), dk, rng));
                     Parameter& v = leaf(s, random_matrix(ks.total(), dv, rng));
                     const double scale = std::sqrt(static_cast<double>(dk));
                     const auto seed = rng.next_u64();
                     return [&q, &k, &v, qs, ks, heads, scale, seed](ad::Tape& t) {
                       return project(ad::segmented_attention(t.param(q), t.param(k), t.param(v), heads, qs, ks, scale), seed);
                     };
                   }});
  cases.push_back({"mog_average_loglik", [leaf](ParameterStore& s, Rng& rng) -> Forward {
                     const Index k = small(rng, 1, 4), dims = small(rng, 1, 3);
                     Parameter& raw = leaf(s, random_matrix(k, 1 + 2 * dims, rng));
                     const Matrix x = random_matrix(small(rng, 2, 8), dims, rng, 2.0);
                     return [&raw, x](ad::Tape& t) { return ad::mog_average_loglik(t.param(raw), x); };
                   }});

  // Blocks, with inputs as parameters so input gradients are covered too.
  cases.push_back({"mab", [leaf](ParameterStore& s, Rng& rng) -> Forward {
                     const Index heads = small(rng, 1, 2), dim = block_width(rng, heads);
                     const Index dx = small(rng), dy = small(rng);
                     const auto mab = make_mab(s, "mab", dx, dy, dim, heads, rng);
                     Parameter& x = leaf(s, random_matrix(small(rng), dx, rng));
                     Parameter& y = leaf(s, random_matrix(small(rng), dy, rng));
                     const auto seed = rng.next_u64();
                     return [mab, &x, &y, seed](ad::Tape& t) { return project(ad::mab(t.param(x), t.param(y), mab), seed); };
                   }});
  cases.push_back({"sab", [leaf](ParameterStore& s, Rng& rng) -> Forward {
                     const Index heads = small(rng, 1, 2), dim = block_width(rng, heads);
                     const auto sab = make_mab(s, "sab", dim, dim, dim, heads, rng);
                     const auto segs = random_segments(rng, 2, 1, 5);
                     Parameter& x = leaf(s, random_matrix(segs.total(), dim, rng));
                     const auto seed = rng.next_u64();
                     return [sab, &x, segs, seed](ad::Tape& t) { return project(ad::sab(t.param(x), sab, segs), seed); };
                   }});
  cases.push_back({"isab", [leaf](ParameterStore& s, Rng& rng) -> Forward {
                     const Index heads = small(rng, 1, 2), dim = block_width(rng, heads);
                     const Index in = small(rng);
                     const auto isab = make_isab(s, "isab", in, dim, heads, small(rng, 1, 4), rng);
                     const auto segs = random_segments(rng, 2, 1, 5);
                     Parameter& x = leaf(s, random_matrix(segs.total(), in, rng));
                     const auto seed = rng.next_u64();
                     return [isab, &x, segs, seed](ad::Tape& t) { return project(ad::isab(t.param(x), isab, segs), seed); };
                   }});
  cases.push_back({"pma", [leaf](ParameterStore& s, Rng& rng) -> Forward {
                     const Index heads = small(rng, 1, 2), dim = block_width(rng, heads);
                     const auto pma = make_pma(s, "pma", dim, dim, heads, small(rng, 1, 3), rng.uniform() < 0.5, rng);
                     const auto segs = random_segments(rng, 2, 1, 5);
                     Parameter& z = leaf(s, random_matrix(segs.total(), dim, rng));
                     const auto seed = rng.next_u64();
                     return [pma, &z, segs, seed](ad::Tape& t) { return project(ad::pma(t.param(z), pma, segs), seed); };
                   }});
  cases.push_back({"rffp", [leaf](ParameterStore& s, Rng& rng) -> Forward {
                     const ad::Pool pool = rng.uniform() < 0.5 ? ad::Pool::Mean : ad::Pool::Max;
                     const Index in = small(rng);
                     const auto rffp = make_rffp(s, "rffp", in, small(rng), pool, rng);
                     const auto segs = random_segments(rng, 2, 1, 5);
                     Parameter& x = leaf(s, random_matrix(segs.total(), in, rng));
                     const auto seed = rng.next_u64();
                     return [rffp, &x, segs, seed](ad::Tape& t) { return project(ad::rffp(t.param(x), rffp, segs), seed); };
                   }});
  cases.push_back({"dotprod_pool", [leaf](ParameterStore& s, Rng& rng) -> Forward {
                     const Index dim = small(rng);
                     const auto segs = random_segments(rng, 2, 1, 5);
                     Parameter& z = leaf(s, random_matrix(segs.total(), dim, rng));
                     Parameter& w = leaf(s, random_matrix(1, dim, rng));
                     const auto seed = rng.next_u64();
                     return [&z, &w, segs, seed](ad::Tape& t) { return project(ad::dotprod_pool(t.param(z), t.param(w), segs), seed); };
                   }});
  return cases;
}

void add_kernel_invariants(CheckReport& report, Rng& rng, std::uint64_t seed) {
  // Softmax rows sum to one and ignore a constant shift.
  double sum_err = 0.0, shift_err = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix x = random_matrix(small(rng), small(rng), rng, 10.0);
    const Matrix p = softmax_rows(x, 1.0);
    sum_err = std::max(sum_err, (p.rowwise().sum().array() - 1.0).abs().maxCoeff());
    const Matrix shifted = (x.array() + 100.0 * rng.normal()).matrix();
    shift_err = std::max(shift_err, (softmax_rows(shifted, 1.0) - p).cwiseAbs().maxCoeff());
  }
  report.cases.push_back(make_case("grad", "softmax_row_sums", sum_err, kExactTol, seed));
  report.cases.push_back(make_case("grad", "softmax_shift_invariance", shift_err, kExactTol, seed));

  double mean_err = 0.0, var_err = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Index c = small(rng, 2, 8);
    const Matrix x = random_matrix(small(rng), c, rng, 5.0);
    const Matrix y = layernorm_rows(x, RowVector::Ones(c), RowVector::Zero(c), 1e-12);
    mean_err = std::max(mean_err, y.rowwise().mean().cwiseAbs().maxCoeff());
    var_err = std::max(var_err, (y.array().square().rowwise().mean() - 1.0).abs().maxCoeff());
  }
  report.cases.push_back(make_case("grad", "layernorm_row_mean", mean_err, 1e-10, seed));
  report.cases.push_back(make_case("grad", "layernorm_row_variance", var_err, 1e-6, seed));
}

void add_model_gradient_cases(CheckReport& report, const CheckOptions& options) {
  for (int a = 0; a < options.architectures; ++a) {
    const std::uint64_t arch_seed = splitmix64(options.seed ^ (0x6d0de1ULL + static_cast<std::uint64_t>(a)));
    Rng arch_rng(arch_seed);
    const ModelConfig cfg = random_architecture(arch_rng);
    // Weights and inputs are redrawn while the sample sits next to a kink.
    std::uint64_t seed = 0;
    GradCheckResult r;
    std::optional<Model> model;
    Matrix x;
    ad::Segments segs;
    std::uint64_t proj_seed = 0;
    Forward f;
    int redrawn = 0;
    for (int attempt = 0; attempt < kMaxRedraws; ++attempt) {
      seed = splitmix64(arch_seed + static_cast<std::uint64_t>(attempt));
      Rng rng(seed);
      model.emplace(cfg, rng);
      segs = random_segments(rng, 2, 2, 5);
      x = random_matrix(segs.total(), cfg.input_dim, rng);
      proj_seed = rng.next_u64();
      f = [&](ad::Tape& t) { return project(model->forward(t, x, segs), proj_seed); };
      r = finite_diff_check(f, model->parameters().pointers());
      if (r.kink_margin >= kKinkMargin) break;
      ++redrawn;
    }
    auto params = model->parameters().pointers();

    std::ostringstream name;
    name << "model[" << a << "]";
    std::string detail = "worst parameter " + r.worst_parameter;
    if (redrawn > 0) detail += ", " + std::to_string(redrawn) + " draws near a kink skipped";
    report.cases.push_back(make_case("grad", name.str() + " gradient", r.max_rel_error, kGradTol, seed, detail));

    // Same inputs, same tape construction: bit-identical values and gradients.
    auto snapshot = [&] {
      model->parameters().zero_grad();
      ad::Tape t;
      const ad::Var loss = f(t);
      t.backward(loss);
      std::vector<Matrix> out{loss.value()};
      for (const Parameter* p : params) out.push_back(p->grad);
      return out;
    };
    const auto first = snapshot();
    const auto second = snapshot();
    double diff = 0.0;
    for (std::size_t i = 0; i < first.size(); ++i) diff = std::max(diff, (first[i] - second[i]).cwiseAbs().maxCoeff());
    report.cases.push_back(make_case("grad", name.str() + " deterministic", diff, 0.0, seed));
  }
}

// Every parameter of every block and of representative models receives a
// nonzero gradient from a generic loss. Sizes are chosen so that nothing is
// degenerate by construction (one inducing point, one key, LayerNorm over
// fewer than three features).
void add_live_gradient_cases(CheckReport& report, std::uint64_t seed) {
  Rng rng(seed);
  const ad::Segments segs{{7, 9}};
  auto record = [&](const std::string& name, ParameterStore& store, const Forward& f) {
    store.zero_grad();
    ad::Tape t;
    t.backward(f(t));
    std::string dead;
    for (const Parameter& p : store) {
      if (p.grad.size() == 0 || p.grad.cwiseAbs().maxCoeff() == 0.0) dead += (dead.empty() ? "" : ", ") + p.name;
    }
    report.cases.push_back(make_case("grad", name + " parameters all receive gradient", dead.empty() ? 0.0 : 1.0,
                                     0.0, seed, dead.empty() ? "" : "zero gradient: " + dead));
  };
  {
    ParameterStore store;
    const auto p = make_mab(store, "mab", 3, 5, 8, 2, rng);
    const Matrix x = random_matrix(6, 3, rng), y = random_matrix(9, 5, rng);
    const auto ps = rng.next_u64();
    record("mab", store, [&](ad::Tape& t) { return project(ad::mab(t.constant(x), t.constant(y), p), ps); });
  }
  {
    ParameterStore store;
    const auto p = make_mab(store, "sab", 8, 8, 8, 2, rng);
    const Matrix x = random_matrix(segs.total(), 8, rng);
    const auto ps = rng.next_u64();
    record("sab", store, [&](ad::Tape& t) { return project(ad::sab(t.constant(x), p, segs), ps); });
  }
  {
    ParameterStore store;
    const auto p = make_isab(store, "isab", 3, 8, 2, 4, rng);
    const Matrix x = random_matrix(segs.total(), 3, rng);
    const auto ps = rng.next_u64();
    record("isab", store, [&](ad::Tape& t) { return project(ad::isab(t.constant(x), p, segs), ps); });
  }
  {
    ParameterStore store;
    const auto p = make_pma(store, "pma", 8, 8, 2, 2, true, rng);
    const Matrix z = random_matrix(segs.total(), 8, rng);
    const auto ps = rng.next_u64();
    record("pma", store, [&](ad::Tape& t) { return project(ad::pma(t.constant(z), p, segs), ps); });
  }
  for (ad::Pool pool : {ad::Pool::Mean, ad::Pool::Max}) {
    ParameterStore store;
    const auto p = make_rffp(store, "rffp", 3, 8, pool, rng);
    const Matrix x = random_matrix(segs.total(), 3, rng);
    const auto ps = rng.next_u64();
    record(pool == ad::Pool::Mean ? "rffp-mean" : "rffp-max", store,
           [&](ad::Tape& t) { return project(ad::rffp(t.constant(x), p, segs), ps); });
  }
  const char* models[][2] = {
      {"set transformer", "model.encoder = isab:4, isab:4\nmodel.pool = pma:3\nmodel.post_sabs = 1\nmodel.head = fc:5"},
      {"sab encoder", "model.encoder = fc:16, sab, sab\nmodel.pool = pma:1\nmodel.pma_rff = true\nmodel.head = fc:1"},
      {"rff pooling", "model.encoder = fc:16:relu, fc:16\nmodel.pool = mean\nmodel.head = fc:16:relu, fc:3"},
      {"rffp dotprod", "model.encoder = rffp-max:16, rffp-mean:16\nmodel.pool = dotprod\nmodel.head = fc:16:relu, fc:3"},
  };
  for (const auto& [name, body] : models) {
    const KeyValues kv = KeyValues::parse(std::string("model.input_dim = 2\nmodel.dim = 16\nmodel.heads = 4\n") + body);
    Model model(ModelConfig::from(kv), rng);
    const Matrix x = random_matrix(segs.total(), 2, rng, 2.0);
    const auto ps = rng.next_u64();
    record(name, model.parameters(), [&](ad::Tape& t) { return project(model.forward(t, x, segs), ps); });
  }
}

void add_adam_scale_case(CheckReport& report, std::uint64_t seed) {
  Rng rng(seed);
  Parameter a("a", random_matrix(3, 3, rng));
  Parameter b("b", a.value);
  const Matrix g = away_from_zero(random_matrix(3, 3, rng));
  a.grad = g;
  b.grad = 1e3 * g;
  std::vector<Parameter*> pa{&a}, pb{&b};
  AdamState sa(pa), sb(pb);
  const Matrix start = a.value;
  adam_step(pa, sa, 1e-3);
  adam_step(pb, sb, 1e-3);
  const double err = relative_error(a.value - start, b.value - start);
  report.cases.push_back(make_case("grad", "adam_gradient_scale_consistency", err, 1e-6, seed));
}

}  // namespace

ModelConfig random_architecture(Rng& rng) {
  ModelConfig cfg;
  cfg.input_dim = rng.uniform_int(1, 4);
  cfg.heads = rng.uniform_int(1, 2);
  cfg.dim = block_width(rng, cfg.heads);
  cfg.encoder.clear();
  const int kind = static_cast<int>(rng.uniform_int(0, 4));
  switch (kind) {
    case 0:
      cfg.encoder = {EncoderLayer::parse("sab"), EncoderLayer::parse("sab")};
      break;
    case 1:
      cfg.encoder = {EncoderLayer::parse("isab:" + std::to_string(rng.uniform_int(1, 4))),
                     EncoderLayer::parse("isab:" + std::to_string(rng.uniform_int(1, 4)))};
      break;
    case 2:
      cfg.encoder = {EncoderLayer::parse("rffp-mean:" + std::to_string(cfg.dim)),
                     EncoderLayer::parse("rffp-max:" + std::to_string(cfg.dim))};
      break;
    case 3:
      cfg.encoder = {EncoderLayer::parse("fc:" + std::to_string(cfg.dim) + ":relu"),
                     EncoderLayer::parse("fc:" + std::to_string(cfg.dim))};
      break;
    default:
      cfg.encoder = {EncoderLayer::parse("fc:" + std::to_string(cfg.dim)), EncoderLayer::parse("sab")};
      break;
  }
  const int pool = static_cast<int>(rng.uniform_int(0, 4));
  cfg.post_sabs = 0;
  cfg.pma_rff = false;
  cfg.seeds = 1;
  switch (pool) {
    case 0: cfg.pool = PoolKind::Mean; break;
    case 1: cfg.pool = PoolKind::Sum; break;
    case 2: cfg.pool = PoolKind::Max; break;
    case 3: cfg.pool = PoolKind::Dotprod; break;
    default:
      cfg.pool = PoolKind::Pma;
      cfg.seeds = rng.uniform_int(1, 3);
      cfg.pma_rff = rng.uniform() < 0.5;
      cfg.post_sabs = rng.uniform_int(0, 1);
      break;
  }
  cfg.head = {HeadLayer{cfg.dim, true}, HeadLayer{rng.uniform_int(1, 3), false}};
  cfg.validate();
  return cfg;
}

CheckReport check_gradients(const CheckOptions& options) {
  CheckReport report;
  const auto cases = op_cases();
  for (std::size_t i = 0; i < cases.size(); ++i) {
    double worst = 0.0;
    std::uint64_t worst_seed = 0;
    std::string detail;
    int redrawn = 0;
    for (int trial = 0; trial < options.grad_trials; ++trial) {
      GradCheckResult r;
      std::uint64_t seed = 0;
      for (int attempt = 0; attempt < kMaxRedraws; ++attempt) {
        seed = splitmix64(options.seed ^ splitmix64(i * 1000 + static_cast<std::uint64_t>(trial) * 50 +
                                                    static_cast<std::uint64_t>(attempt)));
        Rng rng(seed);
        ParameterStore store;
        const Forward f = cases[i].setup(store, rng);
        r = finite_diff_check(f, store.pointers());
        if (r.kink_margin >= kKinkMargin) break;
        ++redrawn;
      }
      if (!(r.max_rel_error <= worst) || trial == 0) {
        worst = r.max_rel_error;
        worst_seed = seed;
        detail = "worst parameter " + r.worst_parameter;
      }
    }
    if (redrawn > 0) detail += ", " + std::to_string(redrawn) + " draws near a kink skipped";
    report.cases.push_back(make_case("grad", cases[i].name, worst, kGradTol, worst_seed, detail));
  }
  for (std::size_t i = 0; i < options.extra_grad_cases.size(); ++i) {
    const std::uint64_t seed = splitmix64(options.seed ^ (0xe7a0ULL + i));
    Rng rng(seed);
    const GradCheckResult r = options.extra_grad_cases[i].run(rng);
    report.cases.push_back(make_case("grad", options.extra_grad_cases[i].name, r.max_rel_error, kGradTol, seed,
                                     "worst parameter " + r.worst_parameter));
  }
  add_model_gradient_cases(report, options);
  Rng rng(splitmix64(options.seed ^ 0x6b65726eULL));
  add_kernel_invariants(report, rng, splitmix64(options.seed ^ 0x6b65726eULL));
  add_adam_scale_case(report, splitmix64(options.seed ^ 0xada3ULL));
  add_live_gradient_cases(report, splitmix64(options.seed ^ 0x11feULL));
  return report;
}

namespace {

/// Worst relative deviation of f(permuted input) from the expected value
/// over `count` random permutations.
template <typename F, typename Expect>
double worst_over_permutations(const Matrix& x, int count, Rng& rng, F f, Expect expected) {
  double worst = 0.0;
  for (int p = 0; p < count; ++p) {
    const auto perm = random_permutation(x.rows(), rng);
    worst = std::max(worst, relative_error(f(permute_rows(x, perm)), expected(perm)));
  }
  return worst;
}

Matrix eval_block(const std::function<ad::Var(ad::Tape&, const ad::Var&)>& block, const Matrix& x) {
  ad::Tape t;
  t.set_grad_enabled(false);
  return block(t, t.constant(x)).value();
}

}  // namespace

CheckReport check_permutations(const CheckOptions& options) {
  CheckReport report;
  // Full models are invariant.
  for (int a = 0; a < options.architectures; ++a) {
    const std::uint64_t seed = splitmix64(options.seed ^ (0x7065726dULL + static_cast<std::uint64_t>(a)));
    Rng rng(seed);
    const ModelConfig cfg = random_architecture(rng);
    const Model model(cfg, rng);
    const Matrix x = random_matrix(rng.uniform_int(5, 40), cfg.input_dim, rng);
    const Matrix base = model.predict(x);
    const double err = worst_over_permutations(
        x, options.permutations, rng, [&](const Matrix& px) { return model.predict(px); },
        [&](const std::vector<Index>&) { return base; });
    std::ostringstream name;
    name << "model[" << a << "] invariance";
    report.cases.push_back(make_case("perm", name.str(), err, kPermTol, seed,
                                     "n=" + std::to_string(x.rows()) + ", " +
                                         std::to_string(options.permutations) + " permutations"));
  }
  for (std::size_t i = 0; i < options.models.size(); ++i) {
    const Model& model = *options.models[i];
    const std::uint64_t seed = splitmix64(options.seed ^ (0x747261ULL + i));
    Rng rng(seed);
    const Matrix x = random_matrix(rng.uniform_int(5, 60), model.config().input_dim, rng, 2.0);
    const Matrix base = model.predict(x);
    const double err = worst_over_permutations(
        x, options.permutations, rng, [&](const Matrix& px) { return model.predict(px); },
        [&](const std::vector<Index>&) { return base; });
    report.cases.push_back(make_case("perm", "trained model[" + std::to_string(i) + "] invariance", err, kPermTol, seed));
  }

  // Blocks are equivariant.
  struct BlockCase {
    std::string name;
    std::function<std::function<ad::Var(ad::Tape&, const ad::Var&)>(ParameterStore&, Rng&, Index)> make;
  };
  const std::vector<BlockCase> blocks = {
      {"sab", [](ParameterStore& s, Rng& rng, Index in) {
         const auto p = make_mab(s, "sab", in, in, 8, 2, rng);
         return std::function<ad::Var(ad::Tape&, const ad::Var&)>([p](ad::Tape&, const ad::Var& x) { return ad::sab(x, p); });
       }},
      {"isab", [](ParameterStore& s, Rng& rng, Index in) {
         const auto p = make_isab(s, "isab", in, 8, 2, rng.uniform_int(1, 6), rng);
         return std::function<ad::Var(ad::Tape&, const ad::Var&)>([p](ad::Tape&, const ad::Var& x) { return ad::isab(x, p); });
       }},
      {"rffp-mean", [](ParameterStore& s, Rng& rng, Index in) {
         const auto p = make_rffp(s, "rffp", in, 6, ad::Pool::Mean, rng);
         return std::function<ad::Var(ad::Tape&, const ad::Var&)>([p](ad::Tape&, const ad::Var& x) {
           return ad::rffp(x, p, ad::Segments::single(x.rows()));
         });
       }},
      {"rffp-max", [](ParameterStore& s, Rng& rng, Index in) {
         const auto p = make_rffp(s, "rffp", in, 6, ad::Pool::Max, rng);
         return std::function<ad::Var(ad::Tape&, const ad::Var&)>([p](ad::Tape&, const ad::Var& x) {
           return ad::rffp(x, p, ad::Segments::single(x.rows()));
         });
       }},
  };
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::uint64_t seed = splitmix64(options.seed ^ (0xb10cULL + b));
    Rng rng(seed);
    ParameterStore store;
    const Index in = rng.uniform_int(1, 8);
    const auto block = blocks[b].make(store, rng, in);
    // rFFp layers start with gamma = 0; use a generic value so pooling matters.
    for (Parameter& p : store) {
      if (p.name.ends_with(".gamma") || p.name.ends_with(".lambda")) p.value(0, 0) = rng.normal();
    }
    const Matrix x = random_matrix(rng.uniform_int(5, 40), in, rng);
    const Matrix base = eval_block(block, x);
    const double err = worst_over_permutations(
        x, options.permutations, rng, [&](const Matrix& px) { return eval_block(block, px); },
        [&](const std::vector<Index>& perm) { return permute_rows(base, perm); });
    report.cases.push_back(make_case("perm", blocks[b].name + " equivariance", err, kPermTol, seed));
  }

  // Mixture likelihood does not depend on point order.
  {
    const std::uint64_t seed = splitmix64(options.seed ^ 0x6d6f67ULL);
    Rng rng(seed);
    const MoGDataset ds = gen_synthetic_mog(rng, MogGenConfig{});
    const double base = mog_loglik(ds.points, ds.truth).total;
    double worst = 0.0;
    for (int p = 0; p < options.permutations; ++p) {
      const Matrix px = permute_rows(ds.points, random_permutation(ds.points.rows(), rng));
      worst = std::max(worst, std::abs(mog_loglik(px, ds.truth).total - base) / std::abs(base));
    }
    report.cases.push_back(make_case("perm", "mog_loglik invariance", worst, kExactTol, seed));
  }
  return report;
}

CheckReport check_lemmas(const CheckOptions& options) {
  CheckReport report;
  const std::uint64_t seed = splitmix64(options.seed ^ 0x1e33aULL);
  Rng rng(seed);
  double mean_err = 0.0, mean_err_fused = 0.0, mean_err_mh = 0.0, sum_err = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = rng.uniform_int(1, 50), d = rng.uniform_int(1, 8);
    const Matrix k = random_matrix(n, d, rng, 3.0);
    const Matrix v = random_matrix(n, d, rng, 3.0);
    const RowVector expected_mean = v.colwise().mean();
    const RowVector expected_sum = v.colwise().sum();

    // A zero query attends uniformly: the mean.
    ad::Tape t;
    t.set_grad_enabled(false);
    const auto zero = t.constant(Matrix::Zero(1, d));
    const auto kv = t.constant(k), vv = t.constant(v);
    const double scale = std::sqrt(static_cast<double>(d));
    mean_err = std::max(mean_err, relative_error(ad::att(zero, kv, vv, scale).value(), expected_mean));
    mean_err_fused = std::max(mean_err_fused,
                              relative_error(ad::segmented_attention(zero, kv, vv, 1, ad::Segments::single(1),
                                                                     ad::Segments::single(n), scale).value(),
                                             expected_mean));

    // Multihead with identity value/output maps and one head per column.
    Parameter wq("wq", random_matrix(d, d, rng)), wk("wk", random_matrix(d, d, rng));
    Parameter wv("wv", Matrix::Identity(d, d)), wo("wo", Matrix::Identity(d, d));
    MultiheadParams mh{&wq, &wk, &wv, &wo, d, d};
    const auto out = ad::multihead(zero, vv, vv, mh, ad::Segments::single(1), ad::Segments::single(n));
    mean_err_mh = std::max(mean_err_mh, relative_error(out.value(), expected_mean));

    // Zero seed with omega = 1 + f, f(0) = 0, identity projections: the sum.
    const Matrix ident = Matrix::Identity(d, d);
    const Matrix seed_row = Matrix::Zero(1, d) * ident;
    const Matrix keys = k * ident;
    const Matrix values = v * ident;
    for (int f = 0; f < 3; ++f) {
      const auto omega = [f](double s) {
        switch (f) {
          case 0: return 1.0 + s;
          case 1: return 1.0 + std::max(s, 0.0);
          default: return 1.0 + std::tanh(s);
        }
      };
      const Matrix pooled = attention_elementwise(seed_row, keys, values, scale, omega) * ident;
      sum_err = std::max(sum_err, relative_error(pooled, expected_sum));
    }
  }
  report.cases.push_back(make_case("lemma", "zero-query attention is the mean", mean_err, kExactTol, seed));
  report.cases.push_back(make_case("lemma", "zero-query fused attention is the mean", mean_err_fused, kExactTol, seed));
  report.cases.push_back(make_case("lemma", "zero-query multihead is the mean", mean_err_mh, kExactTol, seed));
  report.cases.push_back(make_case("lemma", "zero-seed 1+f attention is sum pooling", sum_err, kExactTol, seed));
  return report;
}

CheckReport check_mixture(const CheckOptions& options) {
  CheckReport report;
  const std::uint64_t seed = splitmix64(options.seed ^ 0xe3ULL);
  Rng rng(seed);
  // EM never decreases the likelihood, from the truth or from arbitrary
  // starting points.
  double worst_drop = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    MogGenConfig cfg;
    cfg.n_min = 20;
    cfg.n_max = 200;
    const MoGDataset ds = gen_synthetic_mog(rng, cfg);
    MoGParams start = ds.truth;
    if (trial % 2 == 1) {
      start.means = random_matrix(cfg.k, cfg.dims, rng, 3.0);
      start.scales = (random_matrix(cfg.k, cfg.dims, rng).array().abs() + 0.05).matrix();
      for (Index j = 0; j < cfg.k; ++j) start.weights(j) = rng.exponential();
      start.weights /= start.weights.sum();
    }
    MoGParams theta = start;
    for (int it = 0; it < 5; ++it) {
      const double before = mog_loglik(ds.points, theta).per_datum;
      theta = em_step(ds.points, theta).params;
      const double after = mog_loglik(ds.points, theta).per_datum;
      worst_drop = std::max(worst_drop, before - after);
    }
  }
  report.cases.push_back(make_case("em", "EM monotonicity", worst_drop, 1e-9, seed));

  // The head yields valid mixtures for any finite input.
  double head_violation = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const Index k = rng.uniform_int(1, 6), dims = rng.uniform_int(1, 3);
    const double spread = std::pow(10.0, rng.uniform(-2.0, 3.0));
    const MoGParams theta = mog_head(random_matrix(k, 1 + 2 * dims, rng, spread));
    head_violation = std::max(head_violation, std::abs(theta.weights.sum() - 1.0));
    if ((theta.weights.array() < 0.0).any() || !theta.weights.allFinite()) head_violation = 1.0;
    if ((theta.scales.array() < kSigmaFloor).any() || !theta.scales.allFinite()) head_violation = 1.0;
  }
  report.cases.push_back(make_case("em", "mog_head validity", head_violation, kExactTol, seed));

  // ARI symmetry and relabeling invariance.
  double ari_err = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const Index n = rng.uniform_int(2, 100);
    const int ka = static_cast<int>(rng.uniform_int(1, 5)), kb = static_cast<int>(rng.uniform_int(1, 5));
    std::vector<int> a(static_cast<std::size_t>(n)), b(static_cast<std::size_t>(n));
    for (auto& v : a) v = static_cast<int>(rng.uniform_int(0, ka - 1));
    for (auto& v : b) v = static_cast<int>(rng.uniform_int(0, kb - 1));
    const double ab = adjusted_rand_index(a, b);
    const double ba = adjusted_rand_index(b, a);
    if (ab != ba) ari_err = std::max(ari_err, std::abs(ab - ba) + 1.0);
    std::vector<int> relabel(5);
    for (int i = 0; i < 5; ++i) relabel[static_cast<std::size_t>(i)] = (i * 3 + 1) % 5;
    std::vector<int> a2 = a;
    for (auto& v : a2) v = relabel[static_cast<std::size_t>(v)];
    ari_err = std::max(ari_err, std::abs(adjusted_rand_index(a2, b) - ab));
  }
  report.cases.push_back(make_case("em", "ARI symmetry and relabeling", ari_err, kExactTol, seed));

  // Oracle likelihood on the default generator.
  const auto oracle = evaluate_clustering(nullptr, MogGenConfig{}, 200, seed);
  const double ll = oracle.ll0.mean;
  const double distance = ll < -1.53 ? -1.53 - ll : (ll > -1.42 ? ll + 1.42 : 0.0);
  report.cases.push_back(make_case("em", "oracle LL/data in [-1.53, -1.42]", distance, 0.0, seed,
                                   "mean LL/data " + std::to_string(ll)));
  return report;
}

CheckReport run_checks(const std::string& suite, const CheckOptions& options) {
  if (suite == "grad") return check_gradients(options);
  if (suite == "perm") return check_permutations(options);
  if (suite == "lemma") return check_lemmas(options);
  if (suite == "em") return check_mixture(options);
  if (suite == "all") {
    CheckReport all;
    for (const char* s : kCheckSuites) {
      CheckReport r = run_checks(s, options);
      all.cases.insert(all.cases.end(), r.cases.begin(), r.cases.end());
    }
    return all;
  }
  throw ContractError("unknown check suite '" + suite + "' (expected grad, perm, lemma, em or all)");
}

}  // namespace settx
