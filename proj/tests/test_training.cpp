#include "helpers.hpp"
#include "settx/check.hpp"
#include "settx/training.hpp"

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <sstream>

using namespace settx;
using settx::testing::random_matrix;

namespace {

// Scalar Adam, written independently of adam_step.
struct ReferenceAdam {
  std::vector<double> m, v;
  int t = 0;
  void step(std::vector<double>& x, const std::vector<double>& g, double lr) {
    if (m.empty()) {
      m.assign(x.size(), 0.0);
      v.assign(x.size(), 0.0);
    }
    ++t;
    for (std::size_t i = 0; i < x.size(); ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mhat = m[i] / (1.0 - std::pow(0.9, t));
      const double vhat = v[i] / (1.0 - std::pow(0.999, t));
      x[i] -= lr * mhat / (std::sqrt(vhat) + 1e-8);
    }
  }
};

bool bit_equal(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

const char* kTinyMax =
    "task = max-regression\nmodel.input_dim = 1\nmodel.dim = 8\nmodel.heads = 2\n"
    "model.encoder = fc:8, sab\nmodel.pool = pma:1\nmodel.head = fc:1\n"
    "train.steps = 30\ntrain.batch = 8\ntrain.lr = 1e-3\ntrain.seed = 3\n"
    "train.eval_every = 10\ntrain.eval_datasets = 20\n";

const char* kTinyClustering =
    "task = amortized-clustering\nmodel.input_dim = 2\nmodel.dim = 8\nmodel.heads = 2\n"
    "model.encoder = isab:4\nmodel.pool = pma:4\nmodel.post_sabs = 1\nmodel.head = fc:5\n"
    "data.k = 4\ndata.n_min = 20\ndata.n_max = 40\n"
    "train.steps = 6\ntrain.batch = 3\ntrain.lr = 1e-3\ntrain.seed = 5\n"
    "train.lr_decay_step = 4\ntrain.eval_every = 3\ntrain.eval_datasets = 5\n";

}  // namespace

TEST_CASE("adam matches a hand-written reference on a quadratic") {
  Rng rng(51);
  Parameter p("x", random_matrix(3, 4, rng));
  const Matrix curvature = (random_matrix(3, 4, rng).array().abs() + 0.1).matrix();
  std::vector<double> x(p.value.data(), p.value.data() + p.value.size());
  std::vector<Parameter*> params{&p};
  AdamState state(params);
  ReferenceAdam ref;
  for (int step = 0; step < 100; ++step) {
    p.grad = curvature.cwiseProduct(p.value);
    std::vector<double> g(p.grad.data(), p.grad.data() + p.grad.size());
    REQUIRE(adam_step(params, state, 1e-2));
    ref.step(x, g, 1e-2);
  }
  double worst = 0.0;
  for (Index i = 0; i < p.value.size(); ++i) worst = std::max(worst, std::abs(p.value.data()[i] - x[static_cast<std::size_t>(i)]));
  CHECK(worst < 1e-12);
  CHECK(state.step == 100);
}

TEST_CASE("adam leaves parameters alone on zero or non-finite gradients") {
  Parameter p("x", Matrix::Constant(2, 2, 1.5));
  std::vector<Parameter*> params{&p};
  AdamState state(params);
  p.grad = Matrix::Zero(2, 2);
  CHECK(adam_step(params, state, 1e-3));
  CHECK(p.value == Matrix::Constant(2, 2, 1.5));

  p.grad(0, 1) = std::nan("");
  const auto before = state.step;
  CHECK_FALSE(adam_step(params, state, 1e-3));
  CHECK(p.value == Matrix::Constant(2, 2, 1.5));
  CHECK(state.step == before);
}

TEST_CASE("adam first step is nearly invariant to gradient scale") {
  Rng rng(52);
  const Matrix g = (random_matrix(4, 4, rng).array().abs() + 0.5).matrix();
  for (double c : {1e-2, 10.0, 1e4}) {
    Parameter a("a", Matrix::Zero(4, 4)), b("b", Matrix::Zero(4, 4));
    std::vector<Parameter*> pa{&a}, pb{&b};
    AdamState sa(pa), sb(pb);
    a.grad = g;
    b.grad = c * g;
    adam_step(pa, sa, 1e-3);
    adam_step(pb, sb, 1e-3);
    // eps perturbs the step by about eps / |g| relative.
    const double bound = 2e-8 / std::min(1.0, c) / g.minCoeff();
    CHECK(relative_error(a.value, b.value) < bound);
    // The bias-corrected first step has magnitude lr.
    CHECK(a.value.cwiseAbs().maxCoeff() == doctest::Approx(1e-3).epsilon(1e-6));
  }
}

TEST_CASE("train config names bad keys") {
  const std::string base = kTinyMax;
  CHECK(TrainConfig::from(KeyValues::parse(base)).steps == 30);

  auto key_of = [](const std::string& text) {
    try {
      TrainConfig::from(KeyValues::parse(text));
    } catch (const ConfigError& e) {
      return e.key();
    }
    return std::string("<none>");
  };
  CHECK(key_of(base + "train.momentum = 0.9\n") == "train.momentum");
  std::string missing = base;
  missing.erase(missing.find("train.lr = 1e-3\n"), std::strlen("train.lr = 1e-3\n"));
  CHECK(key_of(missing) == "train.lr");
  std::string bad = base;
  bad.replace(bad.find("train.batch = 8"), std::strlen("train.batch = 8"), "train.batch = eight");
  CHECK(key_of(bad) == "train.batch");
  CHECK(key_of(std::string(kTinyClustering) + "data.k = 3\n") == "data.k");  // duplicate
  std::string wrong_head = kTinyClustering;
  wrong_head.replace(wrong_head.find("fc:5"), 4, "fc:4");
  CHECK(key_of(wrong_head) == "model.head");
}

TEST_CASE("resolved config round-trips and the schedule decays once") {
  const TrainConfig cfg = TrainConfig::from(KeyValues::parse(kTinyClustering));
  const TrainConfig again = TrainConfig::from(KeyValues::parse(cfg.to_kv().to_text()));
  CHECK(again.to_kv().to_text() == cfg.to_kv().to_text());
  CHECK(cfg.lr_at(3) == 1e-3);
  CHECK(cfg.lr_at(4) == doctest::Approx(1e-4));
  CHECK(cfg.lr_at(100) == doctest::Approx(1e-4));
  CHECK(cfg.spec() == again.spec());
}

TEST_CASE("training is reproducible bit for bit") {
  for (const char* text : {kTinyMax, kTinyClustering}) {
    const TrainConfig cfg = TrainConfig::from(KeyValues::parse(text));
    const TrainResult a = train(cfg);
    const TrainResult b = train(cfg);
    REQUIRE(a.losses.size() == static_cast<std::size_t>(cfg.steps));
    CHECK(a.losses == b.losses);
    REQUIRE(a.model.parameters().size() == b.model.parameters().size());
    auto it = b.model.parameters().begin();
    for (const Parameter& p : a.model.parameters()) CHECK(bit_equal(p.value, (it++)->value));
    REQUIRE(a.history.size() == b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) CHECK(a.history[i].metrics == b.history[i].metrics);
  }
}

TEST_CASE("training records window means and evaluation metrics") {
  const TrainConfig cfg = TrainConfig::from(KeyValues::parse(kTinyMax));
  std::vector<long long> sink_steps;
  const TrainResult r = train(cfg, [&](const MetricsRecord& rec, const Model&) { sink_steps.push_back(rec.step); });
  CHECK(sink_steps == std::vector<long long>{10, 20, 30});
  REQUIRE(r.history.size() == 3);
  double first = 0;
  for (int i = 0; i < 10; ++i) first += r.losses[static_cast<std::size_t>(i)];
  CHECK(r.history[0].loss == doctest::Approx(first / 10).epsilon(1e-14));
  CHECK(r.history[0].metrics.front().first == "mae");

  const TrainConfig ccfg = TrainConfig::from(KeyValues::parse(kTinyClustering));
  const TrainResult c = train(ccfg);
  std::vector<std::string> names;
  for (const auto& [name, value] : c.history.back().metrics) names.push_back(name);
  CHECK(names == std::vector<std::string>{"ll0", "ll1", "ari0", "ari1", "lr"});
  CHECK(c.history.back().metrics[4].second == doctest::Approx(1e-4));
}

TEST_CASE("training keeps the model permutation invariant") {
  const TrainConfig cfg = TrainConfig::from(KeyValues::parse(kTinyClustering));
  const TrainResult r = train(cfg);
  CheckOptions options;
  options.architectures = 0;
  options.permutations = 20;
  options.models = {&r.model};
  const CheckReport report = check_permutations(options);
  for (const auto& c : report.cases) {
    if (c.name.rfind("trained", 0) == 0) CHECK(c.error <= 1e-9);
  }
}

TEST_CASE("window medians") {
  const std::vector<double> losses{5, 1, 3, 2, 8, 4, 9};
  CHECK(window_medians(losses, 3) == std::vector<double>{3, 4});
  CHECK(window_medians(losses, 2) == std::vector<double>{3, 2.5, 6});
  CHECK_THROWS_AS(window_medians(losses, 0), ContractError);
}

TEST_CASE("metrics CSV has a fixed schema") {
  CHECK(std::string(kMetricsHeader) == "step,loss,metric_name,metric_value,wall_s");
  MetricsRecord rec;
  rec.step = 7;
  rec.loss = 0.5;
  rec.metrics = {{"ll0", -1.5}, {"ari0", 0.25}};
  rec.wall_s = 2.0;
  std::ostringstream out;
  append_metrics_csv(out, rec);
  CHECK(out.str() == "7,0.5,ll0,-1.5,2\n7,0.5,ari0,0.25,2\n");
}

TEST_CASE("clustering evaluation is independent of worker count and EM helps") {
  const MogGenConfig data;
  const ClusteringEval one = evaluate_clustering(nullptr, data, 40, 9, 1);
  const ClusteringEval four = evaluate_clustering(nullptr, data, 40, 9, 4);
  CHECK(one.ll0.mean == four.ll0.mean);
  CHECK(one.ari1.stddev == four.ari1.stddev);
  for (const auto& d : one.per_dataset) CHECK(d.ll1 >= d.ll0 - 1e-9);

  const TrainConfig cfg = TrainConfig::from(KeyValues::parse(kTinyClustering));
  const TrainResult r = train(cfg);
  const ClusteringEval m1 = evaluate_clustering(&r.model, cfg.mog_data, 12, 4, 1);
  const ClusteringEval m3 = evaluate_clustering(&r.model, cfg.mog_data, 12, 4, 3);
  CHECK(m1.ll0.mean == m3.ll0.mean);
  CHECK(m1.ll1.mean == m3.ll1.mean);
  for (const auto& d : m1.per_dataset) CHECK(d.ll1 >= d.ll0 - 1e-9);
}

TEST_CASE("oracle likelihood per datum is near -1.47") {
  const ClusteringEval e = evaluate_clustering(nullptr, MogGenConfig{}, 300, 17, 4);
  CHECK(e.ll0.mean > -1.53);
  CHECK(e.ll0.mean < -1.42);
  CHECK(e.ari0.mean > 0.8);
}

TEST_CASE("summaries use the population standard deviation") {
  const std::vector<double> v{1, 2, 3, 4};
  const Summary s = summarize(v);
  CHECK(s.mean == 2.5);
  CHECK(s.stddev == doctest::Approx(std::sqrt(1.25)));
}

TEST_CASE("predicted mixtures accept flat and row-wise heads") {
  Rng rng(53);
  const char* flat =
      "model.input_dim = 2\nmodel.dim = 8\nmodel.heads = 2\nmodel.encoder = fc:8:relu\n"
      "model.pool = mean\nmodel.head = fc:20";
  const Model model(ModelConfig::from(KeyValues::parse(flat)), rng);
  const MoGParams theta = predict_mixture(model, random_matrix(30, 2, rng), 4);
  CHECK(theta.components() == 4);
  CHECK(theta.dims() == 2);
  CHECK(theta.weights.sum() == doctest::Approx(1.0));
}
