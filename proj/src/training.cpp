#include "settx/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ostream>
#include <sstream>
#include <thread>

namespace settx {

namespace {

std::string format_double(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

double global_grad_norm(std::span<Parameter* const> params) {
  double total = 0.0;
  for (const Parameter* p : params) {
    if (p->trainable) total += p->grad.squaredNorm();
  }
  return std::sqrt(total);
}

// Eval seeds are kept apart from the training streams.
constexpr std::uint64_t kEvalStream = 0x5e7e7a1ULL;

}  // namespace

AdamState::AdamState(std::span<Parameter* const> params) {
  first.reserve(params.size());
  second.reserve(params.size());
  for (const Parameter* p : params) {
    first.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    second.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

bool adam_step(std::span<Parameter* const> params, AdamState& state, double lr) {
  if (params.size() != state.first.size()) {
    throw ContractError("adam_step: state built for " + std::to_string(state.first.size()) +
                        " parameters, got " + std::to_string(params.size()));
  }
  for (const Parameter* p : params) {
    if (p->trainable && !p->grad.allFinite()) return false;
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    if (!p.trainable) continue;
    Matrix& m = state.first[i];
    Matrix& v = state.second[i];
    m = state.beta1 * m + (1.0 - state.beta1) * p.grad;
    v = state.beta2 * v + (1.0 - state.beta2) * p.grad.cwiseProduct(p.grad);
    p.value.array() -=
        lr * (m.array() / c1) / ((v.array() / c2).sqrt() + state.eps);
  }
  return true;
}

std::string to_string(Task task) {
  return task == Task::MaxRegression ? "max-regression" : "amortized-clustering";
}

Task parse_task(const std::string& text) {
  if (text == "max-regression") return Task::MaxRegression;
  if (text == "amortized-clustering") return Task::AmortizedClustering;
  throw ConfigError("task", "key 'task': unknown task '" + text + "'");
}

TaskSpec TaskSpec::from(const KeyValues& kv) {
  TaskSpec cfg;
  cfg.task = parse_task(kv.require("task"));
  cfg.model = ModelConfig::from(kv);
  if (cfg.task == Task::MaxRegression) {
    cfg.max_data.n_min = kv.get_int("data.n_min", cfg.max_data.n_min);
    cfg.max_data.n_max = kv.get_int("data.n_max", cfg.max_data.n_max);
    cfg.max_data.value_max = kv.get_double("data.value_max", cfg.max_data.value_max);
    if (cfg.max_data.n_min < 1 || cfg.max_data.n_max < cfg.max_data.n_min) {
      throw ConfigError("data.n_max", "key 'data.n_max': need 1 <= data.n_min <= data.n_max");
    }
    if (!(cfg.max_data.value_max > 0.0)) {
      throw ConfigError("data.value_max", "key 'data.value_max': must be positive");
    }
  } else {
    MogGenConfig& d = cfg.mog_data;
    d.k = kv.get_int("data.k", d.k);
    d.n_min = kv.get_int("data.n_min", d.n_min);
    d.n_max = kv.get_int("data.n_max", d.n_max);
    d.mu_min = kv.get_double("data.mu_min", d.mu_min);
    d.mu_max = kv.get_double("data.mu_max", d.mu_max);
    d.sigma = kv.get_double("data.sigma", d.sigma);
    d.dims = kv.get_int("data.dims", d.dims);
    if (d.k < 1) throw ConfigError("data.k", "key 'data.k': must be >= 1");
    if (d.n_min < 1 || d.n_max < d.n_min) {
      throw ConfigError("data.n_max", "key 'data.n_max': need 1 <= data.n_min <= data.n_max");
    }
    if (!(d.sigma > 0.0)) throw ConfigError("data.sigma", "key 'data.sigma': must be positive");
    if (!(d.mu_max > d.mu_min)) {
      throw ConfigError("data.mu_max", "key 'data.mu_max': must exceed data.mu_min");
    }
    if (d.dims < 1) throw ConfigError("data.dims", "key 'data.dims': must be >= 1");
    if (cfg.model.input_dim != d.dims) {
      throw ConfigError("model.input_dim", "key 'model.input_dim': must equal data.dims (" +
                                               std::to_string(d.dims) + ")");
    }
    const Index per_row = 1 + 2 * d.dims;
    const Index width = cfg.model.output_width();
    const bool rows_ok = cfg.model.rows_per_set() == d.k && width == per_row;
    const bool flat_ok = cfg.model.rows_per_set() == 1 && width == d.k * per_row;
    if (!rows_ok && !flat_ok) {
      throw ConfigError("model.head",
                        "key 'model.head': output must be k rows of width 1+2D or one row of width "
                        "k(1+2D) (k=" + std::to_string(d.k) + ", D=" + std::to_string(d.dims) + ")");
    }
  }
  if (cfg.task == Task::MaxRegression &&
      (cfg.model.input_dim != 1 || cfg.model.rows_per_set() != 1 || cfg.model.output_width() != 1)) {
    throw ConfigError("model.head",
                      "key 'model.head': max regression needs input_dim 1 and a single scalar output");
  }

  return cfg;
}

TrainConfig TrainConfig::from(const KeyValues& kv) {
  TrainConfig cfg;
  const TaskSpec spec = TaskSpec::from(kv);
  cfg.task = spec.task;
  cfg.model = spec.model;
  cfg.max_data = spec.max_data;
  cfg.mog_data = spec.mog_data;
  cfg.name = kv.get("name", "");
  cfg.steps = kv.get_int("train.steps");
  cfg.batch = kv.get_int("train.batch");
  cfg.lr = kv.get_double("train.lr");
  cfg.lr_decay_step = kv.get_int("train.lr_decay_step", 0);
  cfg.lr_decay_factor = kv.get_double("train.lr_decay_factor", 0.1);
  cfg.grad_clip = kv.get_double("train.grad_clip", 0.0);
  const long long seed = kv.get_int("train.seed");
  cfg.eval_every = kv.get_int("train.eval_every", 1000);
  cfg.eval_datasets = kv.get_int("train.eval_datasets", 100);
  cfg.out_dir = kv.get("out.dir", "");

  if (cfg.steps < 0) throw ConfigError("train.steps", "key 'train.steps': must be >= 0");
  if (cfg.batch < 1) throw ConfigError("train.batch", "key 'train.batch': must be >= 1");
  if (!(cfg.lr > 0.0) || !std::isfinite(cfg.lr)) {
    throw ConfigError("train.lr", "key 'train.lr': must be a positive finite number");
  }
  if (cfg.lr_decay_step < 0) {
    throw ConfigError("train.lr_decay_step", "key 'train.lr_decay_step': must be >= 0");
  }
  if (!(cfg.lr_decay_factor > 0.0)) {
    throw ConfigError("train.lr_decay_factor", "key 'train.lr_decay_factor': must be positive");
  }
  if (cfg.grad_clip < 0.0) throw ConfigError("train.grad_clip", "key 'train.grad_clip': must be >= 0");
  if (seed < 0) throw ConfigError("train.seed", "key 'train.seed': must be >= 0");
  cfg.seed = static_cast<std::uint64_t>(seed);
  if (cfg.eval_every < 1) throw ConfigError("train.eval_every", "key 'train.eval_every': must be >= 1");
  if (cfg.eval_datasets < 1) {
    throw ConfigError("train.eval_datasets", "key 'train.eval_datasets': must be >= 1");
  }
  kv.check_consumed();
  return cfg;
}

KeyValues TaskSpec::to_kv() const {
  KeyValues kv;
  kv.set("task", to_string(task));
  model.to(kv);
  if (task == Task::MaxRegression) {
    kv.set("data.n_min", std::to_string(max_data.n_min));
    kv.set("data.n_max", std::to_string(max_data.n_max));
    kv.set("data.value_max", format_double(max_data.value_max));
  } else {
    kv.set("data.k", std::to_string(mog_data.k));
    kv.set("data.n_min", std::to_string(mog_data.n_min));
    kv.set("data.n_max", std::to_string(mog_data.n_max));
    kv.set("data.mu_min", format_double(mog_data.mu_min));
    kv.set("data.mu_max", format_double(mog_data.mu_max));
    kv.set("data.sigma", format_double(mog_data.sigma));
    kv.set("data.dims", std::to_string(mog_data.dims));
  }
  return kv;
}

bool TaskSpec::operator==(const TaskSpec& other) const {
  return to_kv().to_text() == other.to_kv().to_text();
}

TaskSpec TrainConfig::spec() const { return TaskSpec{task, model, max_data, mog_data}; }

KeyValues TrainConfig::to_kv() const {
  KeyValues kv = spec().to_kv();
  if (!name.empty()) kv.set("name", name);
  kv.set("train.steps", std::to_string(steps));
  kv.set("train.batch", std::to_string(batch));
  kv.set("train.lr", format_double(lr));
  kv.set("train.lr_decay_step", std::to_string(lr_decay_step));
  kv.set("train.lr_decay_factor", format_double(lr_decay_factor));
  kv.set("train.grad_clip", format_double(grad_clip));
  kv.set("train.seed", std::to_string(seed));
  kv.set("train.eval_every", std::to_string(eval_every));
  kv.set("train.eval_datasets", std::to_string(eval_datasets));
  if (!out_dir.empty()) kv.set("out.dir", out_dir);
  return kv;
}

double TrainConfig::lr_at(long long step) const {
  return (lr_decay_step > 0 && step >= lr_decay_step) ? lr * lr_decay_factor : lr;
}

void append_metrics_csv(std::ostream& out, const MetricsRecord& record) {
  const auto old_precision = out.precision(10);
  for (const auto& [name, value] : record.metrics) {
    out << record.step << ',' << record.loss << ',' << name << ',' << value << ','
        << record.wall_s << '\n';
  }
  out.precision(old_precision);
}

Summary summarize(std::span<const double> values) {
  Summary s;
  if (values.empty()) return s;
  double total = 0.0;
  for (double v : values) total += v;
  s.mean = total / static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(sq / static_cast<double>(values.size()));
  return s;
}

std::vector<double> window_medians(std::span<const double> losses, std::size_t window) {
  if (window == 0) throw ContractError("window_medians: window must be positive");
  std::vector<double> out;
  for (std::size_t start = 0; start + window <= losses.size(); start += window) {
    std::vector<double> w(losses.begin() + static_cast<std::ptrdiff_t>(start),
                          losses.begin() + static_cast<std::ptrdiff_t>(start + window));
    const auto mid = w.begin() + static_cast<std::ptrdiff_t>(window / 2);
    std::nth_element(w.begin(), mid, w.end());
    double median = *mid;
    if (window % 2 == 0) median = 0.5 * (median + *std::max_element(w.begin(), mid));
    out.push_back(median);
  }
  return out;
}

namespace {

/// Shared optimisation loop. `step_loss` builds the loss for one step on
/// the given tape.
template <typename StepLoss, typename Evaluate>
TrainResult run_training(const TrainConfig& cfg, StepLoss&& step_loss, Evaluate&& evaluate,
                         const MetricsSink& sink) {
  Rng init_rng = Rng::derive(cfg.seed, 0);
  TrainResult result{Model(cfg.model, init_rng), {}, {}};
  result.losses.reserve(static_cast<std::size_t>(std::max(0LL, cfg.steps)));
  Model& m = result.model;
  Rng data_rng = Rng::derive(cfg.seed, 1);
  const auto params = m.parameters().pointers();
  AdamState adam(params);

  const auto start = std::chrono::steady_clock::now();
  double window_loss = 0.0;
  long long window_steps = 0;
  long long skipped = 0;
  for (long long step = 1; step <= cfg.steps; ++step) {
    m.parameters().zero_grad();
    ad::Tape tape;
    const ad::Var loss = step_loss(tape, m, data_rng);
    const double value = loss.value()(0, 0);
    if (!std::isfinite(value)) throw NonFiniteLoss(step, value);
    tape.backward(loss);
    if (cfg.grad_clip > 0.0) {
      const double norm = global_grad_norm(params);
      if (std::isfinite(norm) && norm > cfg.grad_clip) {
        for (Parameter* p : params) p->grad *= cfg.grad_clip / norm;
      }
    }
    if (!adam_step(params, adam, cfg.lr_at(step))) ++skipped;
    result.losses.push_back(value);
    window_loss += value;
    ++window_steps;

    if (step % cfg.eval_every == 0 || step == cfg.steps) {
      MetricsRecord record;
      record.step = step;
      record.loss = window_loss / static_cast<double>(window_steps);
      record.metrics = evaluate(m);
      record.metrics.emplace_back("lr", cfg.lr_at(step));
      if (skipped > 0) record.metrics.emplace_back("skipped_steps", static_cast<double>(skipped));
      record.wall_s =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      result.history.push_back(record);
      if (sink) sink(record, m);
      window_loss = 0.0;
      window_steps = 0;
      skipped = 0;
    }
  }
  return result;
}

/// Predicted raw head rows (k x (1+2D)) per set, from the model output.
ad::Var mixture_rows(const ad::Var& out, Index sets, Index k) {
  if (out.rows() == sets * k) return out;
  if (out.rows() == sets && out.cols() % k == 0) return ad::reshape(out, sets * k, out.cols() / k);
  throw DimensionError("mixture head: output " + shape_str(out.value()) + " for " +
                       std::to_string(sets) + " sets of " + std::to_string(k) + " components");
}

}  // namespace

TrainResult train_max_regression(const TrainConfig& cfg, const MetricsSink& sink) {
  if (cfg.task != Task::MaxRegression) throw ContractError("train_max_regression: wrong task");
  const std::uint64_t eval_seed = splitmix64(cfg.seed ^ kEvalStream);
  auto step_loss = [&](ad::Tape& tape, const Model& model, Rng& rng) {
    const MaxRegressionBatch batch = gen_max_regression(rng, cfg.batch, cfg.max_data);
    const ad::Var pred = model.forward(tape, batch.values, batch.segments);
    return ad::mean(ad::abs(ad::sub(pred, tape.constant(batch.targets))));
  };
  auto evaluate = [&](const Model& model) {
    const auto eval = evaluate_max_regression(model, cfg.max_data, cfg.eval_datasets, eval_seed);
    return std::vector<std::pair<std::string, double>>{{"mae", eval.mae.mean}};
  };
  return run_training(cfg, step_loss, evaluate, sink);
}

TrainResult train_amortized_clustering(const TrainConfig& cfg, const MetricsSink& sink) {
  if (cfg.task != Task::AmortizedClustering) {
    throw ContractError("train_amortized_clustering: wrong task");
  }
  const std::uint64_t eval_seed = splitmix64(cfg.seed ^ kEvalStream);
  const Index k = cfg.mog_data.k;
  auto step_loss = [&](ad::Tape& tape, const Model& model, Rng& rng) {
    const Index n = rng.uniform_int(cfg.mog_data.n_min, cfg.mog_data.n_max);
    Matrix stacked(cfg.batch * n, cfg.mog_data.dims);
    std::vector<Matrix> sets;
    sets.reserve(static_cast<std::size_t>(cfg.batch));
    for (Index b = 0; b < cfg.batch; ++b) {
      MoGDataset data = gen_synthetic_mog(rng, cfg.mog_data, n);
      stacked.middleRows(b * n, n) = data.points;
      sets.push_back(std::move(data.points));
    }
    const ad::Var out = model.forward(tape, stacked, ad::Segments::uniform(sets.size(), n));
    const ad::Var rows = mixture_rows(out, cfg.batch, k);
    std::vector<ad::Var> lls;
    lls.reserve(sets.size());
    for (Index b = 0; b < cfg.batch; ++b) {
      lls.push_back(ad::mog_average_loglik(ad::slice_rows(rows, b * k, k), sets[b]));
    }
    return ad::scale(ad::mean(ad::concat_rows(lls)), -1.0);
  };
  auto evaluate = [&](const Model& model) {
    const auto eval = evaluate_clustering(&model, cfg.mog_data, cfg.eval_datasets, eval_seed);
    return std::vector<std::pair<std::string, double>>{{"ll0", eval.ll0.mean},
                                                       {"ll1", eval.ll1.mean},
                                                       {"ari0", eval.ari0.mean},
                                                       {"ari1", eval.ari1.mean}};
  };
  return run_training(cfg, step_loss, evaluate, sink);
}

TrainResult train(const TrainConfig& cfg, const MetricsSink& sink) {
  return cfg.task == Task::MaxRegression ? train_max_regression(cfg, sink)
                                         : train_amortized_clustering(cfg, sink);
}

MoGParams predict_mixture(const Model& model, const Matrix& points, Index k) {
  ad::Tape tape;
  tape.set_grad_enabled(false);
  const ad::Var out = model.forward(tape, points, ad::Segments::single(points.rows()));
  return mog_head(mixture_rows(out, 1, k).value());
}

ClusteringEval evaluate_clustering(const Model* model, const MogGenConfig& data, Index datasets,
                                   std::uint64_t seed, int workers) {
  if (datasets < 1) throw ContractError("evaluate_clustering: need at least one dataset");
  ClusteringEval result;
  result.per_dataset.resize(static_cast<std::size_t>(datasets));
  auto run_one = [&](Index i) {
    Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(i));
    const MoGDataset ds = gen_synthetic_mog(rng, data);
    const MoGParams theta0 = model ? predict_mixture(*model, ds.points, data.k) : ds.truth;
    const MoGParams theta1 = em_step(ds.points, theta0).params;
    DatasetEval& e = result.per_dataset[static_cast<std::size_t>(i)];
    e.n = ds.points.rows();
    e.ll0 = mog_loglik(ds.points, theta0).per_datum;
    e.ll1 = mog_loglik(ds.points, theta1).per_datum;
    e.ari0 = adjusted_rand_index(ds.labels, assign_clusters(ds.points, theta0));
    e.ari1 = adjusted_rand_index(ds.labels, assign_clusters(ds.points, theta1));
  };

  const int threads = std::clamp<int>(workers, 1, static_cast<int>(datasets));
  if (threads == 1) {
    for (Index i = 0; i < datasets; ++i) run_one(i);
  } else {
    // Strided assignment; each dataset writes its own slot, and the summary
    // below reduces in index order, so results match the serial path.
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (Index i = t; i < datasets; i += threads) run_one(i);
        } catch (...) {
          errors[static_cast<std::size_t>(t)] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  std::vector<double> ll0, ll1, ari0, ari1;
  for (const auto& e : result.per_dataset) {
    ll0.push_back(e.ll0);
    ll1.push_back(e.ll1);
    ari0.push_back(e.ari0);
    ari1.push_back(e.ari1);
  }
  result.ll0 = summarize(ll0);
  result.ll1 = summarize(ll1);
  result.ari0 = summarize(ari0);
  result.ari1 = summarize(ari1);
  return result;
}

MaxRegressionEval evaluate_max_regression(const Model& model, const MaxRegressionConfig& data,
                                          Index sets, std::uint64_t seed) {
  if (sets < 1) throw ContractError("evaluate_max_regression: need at least one set");
  std::vector<double> errors;
  errors.reserve(static_cast<std::size_t>(sets));
  for (Index i = 0; i < sets; ++i) {
    Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(i));
    const MaxRegressionBatch batch = gen_max_regression(rng, 1, data);
    errors.push_back(std::abs(model.predict(batch.values)(0, 0) - batch.targets(0, 0)));
  }
  return MaxRegressionEval{summarize(errors)};
}

}  // namespace settx
