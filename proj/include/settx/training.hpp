#pragma once

#include "settx/data.hpp"
#include "settx/model.hpp"

#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>

namespace settx {

/// Bias-corrected Adam moments for a fixed list of parameters.
struct AdamState {
  std::vector<Matrix> first;
  std::vector<Matrix> second;
  long long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit AdamState(std::span<Parameter* const> params);
};

/// Applies one Adam update using each parameter's accumulated gradient.
/// Returns false and changes nothing when any gradient is non-finite.
bool adam_step(std::span<Parameter* const> params, AdamState& state, double lr);

enum class Task { MaxRegression, AmortizedClustering };

std::string to_string(Task task);
Task parse_task(const std::string& text);

/// What a trained model is for: task, architecture and data distribution.
/// This is the part of a configuration that a checkpoint carries.
struct TaskSpec {
  Task task = Task::MaxRegression;
  ModelConfig model;
  MaxRegressionConfig max_data;
  MogGenConfig mog_data;

  /// Reads `task`, `model.*` and `data.*`; does not check for unknown keys.
  static TaskSpec from(const KeyValues& kv);
  KeyValues to_kv() const;

  bool operator==(const TaskSpec&) const;
};

struct TrainConfig {
  Task task = Task::MaxRegression;
  std::string name;
  ModelConfig model;
  long long steps = 0;
  Index batch = 0;  // sets (max regression) or datasets (clustering) per step
  double lr = 1e-3;
  long long lr_decay_step = 0;  // 0 disables the decay
  double lr_decay_factor = 0.1;
  double grad_clip = 0.0;  // global-norm clip, 0 disables
  std::uint64_t seed = 0;
  long long eval_every = 1000;
  Index eval_datasets = 100;
  MaxRegressionConfig max_data;
  MogGenConfig mog_data;
  std::string out_dir;

  /// Reads every recognized key and rejects unknown ones.
  static TrainConfig from(const KeyValues& kv);
  /// Full resolved configuration, defaults included.
  KeyValues to_kv() const;
  TaskSpec spec() const;

  double lr_at(long long step) const;
};

struct MetricsRecord {
  long long step = 0;
  double loss = 0.0;
  std::vector<std::pair<std::string, double>> metrics;
  double wall_s = 0.0;
};

inline constexpr const char* kMetricsHeader = "step,loss,metric_name,metric_value,wall_s";

/// One CSV row per metric of the record.
void append_metrics_csv(std::ostream& out, const MetricsRecord& record);

/// Called after every evaluation with the current model.
using MetricsSink = std::function<void(const MetricsRecord&, const Model&)>;

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(long long step, double loss)
      : std::runtime_error("non-finite training loss " + std::to_string(loss) + " at step " +
                           std::to_string(step)),
        step_(step) {}
  long long step() const { return step_; }

 private:
  long long step_;
};

struct TrainResult {
  Model model;
  std::vector<MetricsRecord> history;
  std::vector<double> losses;  // every step
};

/// Medians of consecutive non-overlapping windows of `window` steps; a
/// trailing partial window is dropped.
std::vector<double> window_medians(std::span<const double> losses, std::size_t window);

/// Minimizes mean |prediction - max(set)|.
TrainResult train_max_regression(const TrainConfig& cfg, const MetricsSink& sink = {});
/// Maximizes the dataset-averaged per-point mixture log-likelihood.
TrainResult train_amortized_clustering(const TrainConfig& cfg, const MetricsSink& sink = {});
TrainResult train(const TrainConfig& cfg, const MetricsSink& sink = {});

struct Summary {
  double mean = 0.0;
  double stddev = 0.0;
};

Summary summarize(std::span<const double> values);

struct DatasetEval {
  Index n = 0;
  double ll0 = 0.0;
  double ll1 = 0.0;
  double ari0 = 0.0;
  double ari1 = 0.0;
};

struct ClusteringEval {
  Summary ll0, ll1, ari0, ari1;
  std::vector<DatasetEval> per_dataset;
};

/// Mixture parameters predicted for one dataset. Accepts either k rows of
/// width 1+2D or one row of width k(1+2D).
MoGParams predict_mixture(const Model& model, const Matrix& points, Index k);

/// Fresh datasets drawn from streams derived from `seed`. With model ==
/// nullptr the generating parameters are scored instead (the oracle).
/// `workers` > 1 evaluates datasets concurrently; results do not depend on it.
ClusteringEval evaluate_clustering(const Model* model, const MogGenConfig& data, Index datasets,
                                   std::uint64_t seed, int workers = 1);

struct MaxRegressionEval {
  Summary mae;
};

/// Mean absolute error over `sets` fresh sets, each with its own size.
MaxRegressionEval evaluate_max_regression(const Model& model, const MaxRegressionConfig& data,
                                          Index sets, std::uint64_t seed);

}  // namespace settx
