#include "settx/cli.hpp"

#include "settx/bench.hpp"
#include "settx/check.hpp"
#include "settx/checkpoint.hpp"
#include "settx/training.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;

namespace settx {
namespace {

/// Opens `path` for appending and writes `header` first if the file is new
/// or empty.
std::ofstream open_csv(const fs::path& path, const char* header) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  if (fresh) out << header << '\n';
  return out;
}

std::string format_summary(const Summary& s) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(4) << s.mean << " ± " << s.stddev;
  return o.str();
}

std::optional<std::uint64_t> env_seed() {
  const char* text = std::getenv("STFM_SEED");
  if (text == nullptr || *text == '\0') return std::nullopt;
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(text, &used);
    if (used != std::string(text).size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("STFM_SEED", std::string("STFM_SEED: expected a non-negative integer, got '") + text + "'");
  }
}

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

int run_train(const TrainArgs& args, std::ostream& out, std::ostream& err) {
  KeyValues kv = KeyValues::load(args.config);
  // Precedence: config file < STFM_SEED < --seed.
  if (const auto s = env_seed()) kv.set("train.seed", std::to_string(*s));
  if (args.seed) kv.set("train.seed", std::to_string(*args.seed));
  if (!args.out.empty()) kv.set("out.dir", args.out);
  const TrainConfig cfg = TrainConfig::from(kv);

  fs::path dir = cfg.out_dir;
  if (dir.empty()) dir = fs::path("runs") / (cfg.name.empty() ? std::string("run") : cfg.name);
  fs::create_directories(dir);
  {
    std::ofstream resolved(dir / "resolved.cfg");
    resolved << cfg.to_kv().to_text();
  }
  std::ofstream metrics = open_csv(dir / "metrics.csv", kMetricsHeader);
  const fs::path ckpt = dir / "model.stfm";
  const TaskSpec spec = cfg.spec();

  out << "training " << (cfg.name.empty() ? to_string(cfg.task) : cfg.name) << " for " << cfg.steps
      << " steps, seed " << cfg.seed << ", output " << dir.string() << '\n';
  const MetricsSink sink = [&](const MetricsRecord& rec, const Model& model) {
    append_metrics_csv(metrics, rec);
    metrics.flush();
    save_checkpoint(ckpt, spec, model);
    out << "step " << rec.step << "  loss " << rec.loss;
    for (const auto& [name, value] : rec.metrics) out << "  " << name << ' ' << value;
    out << "  (" << std::fixed << std::setprecision(1) << rec.wall_s << " s)" << std::defaultfloat << '\n';
    out.flush();
  };
  try {
    train(cfg, sink);
  } catch (const NonFiniteLoss& e) {
    err << "error: " << e.what() << "; aborting";
    if (fs::exists(ckpt)) err << ", last good checkpoint kept at " << ckpt.string();
    err << '\n';
    return kExitNonFinite;
  }
  out << "wrote " << (dir / "metrics.csv").string() << ", " << ckpt.string() << ", "
      << (dir / "resolved.cfg").string() << '\n';
  return kExitOk;
}

struct EvalArgs {
  std::string model;
  std::string task;
  Index datasets = 500;
  std::uint64_t seed = 0;
  bool oracle = false;
  int workers = 1;
  std::string csv = "eval.csv";
};

int run_eval(const EvalArgs& args, std::ostream& out, std::ostream& err) {
  const Task task = parse_task(args.task);
  const auto start = std::chrono::steady_clock::now();
  MetricsRecord rec;

  std::optional<LoadedModel> loaded;
  if (!args.model.empty()) {
    loaded.emplace(load_checkpoint(args.model));
    if (loaded->spec.task != task) {
      err << "error: checkpoint " << args.model << " was trained for " << to_string(loaded->spec.task)
          << ", not " << to_string(task) << '\n';
      return kExitFailure;
    }
  } else if (!args.oracle) {
    err << "error: eval needs --model or --oracle\n";
    return kExitFailure;
  }

  if (task == Task::AmortizedClustering) {
    const MogGenConfig data = loaded ? loaded->spec.mog_data : MogGenConfig{};
    const Model* model = args.oracle ? nullptr : &loaded->model;
    const ClusteringEval e = evaluate_clustering(model, data, args.datasets, args.seed, args.workers);
    out << (args.oracle ? "oracle" : args.model) << " on " << args.datasets << " datasets (seed " << args.seed
        << ")\n";
    out << "  LL0/data  " << format_summary(e.ll0) << '\n'
        << "  LL1/data  " << format_summary(e.ll1) << '\n'
        << "  ARI0      " << format_summary(e.ari0) << '\n'
        << "  ARI1      " << format_summary(e.ari1) << '\n';
    rec.loss = -e.ll0.mean;
    rec.metrics = {{"ll0_mean", e.ll0.mean}, {"ll0_std", e.ll0.stddev}, {"ll1_mean", e.ll1.mean},
                   {"ll1_std", e.ll1.stddev}, {"ari0_mean", e.ari0.mean}, {"ari0_std", e.ari0.stddev},
                   {"ari1_mean", e.ari1.mean}, {"ari1_std", e.ari1.stddev}};
  } else {
    if (args.oracle) {
      err << "error: --oracle applies to amortized-clustering only\n";
      return kExitFailure;
    }
    const MaxRegressionEval e = evaluate_max_regression(loaded->model, loaded->spec.max_data, args.datasets, args.seed);
    out << args.model << " on " << args.datasets << " sets (seed " << args.seed << ")\n"
        << "  MAE  " << format_summary(e.mae) << '\n';
    rec.loss = e.mae.mean;
    rec.metrics = {{"mae_mean", e.mae.mean}, {"mae_std", e.mae.stddev}};
  }
  rec.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::ofstream csv = open_csv(args.csv, kMetricsHeader);
  append_metrics_csv(csv, rec);
  return kExitOk;
}

struct BenchArgs {
  std::string block;
  Index m = 16;
  std::vector<Index> sizes;
  int reps = 5;
  std::uint64_t seed = 0;
  std::string csv = "bench.csv";
};

int run_bench_cmd(const BenchArgs& args, std::ostream& out, std::ostream&) {
  BenchConfig cfg;
  cfg.block = parse_bench_block(args.block);
  cfg.inducing = args.m;
  cfg.sizes = args.sizes;
  cfg.reps = args.reps;
  cfg.seed = args.seed;
  cfg.validate();
  out << "block " << to_string(cfg.block);
  if (cfg.block == BenchBlock::Isab) out << " m=" << cfg.inducing;
  out << ", dim " << cfg.dim << ", " << cfg.heads << " heads, " << cfg.reps << " reps after " << cfg.warmups
      << " warmups\n";
  const BenchReport report = run_bench(cfg, [&](const BenchRow& row) {
    if (row.failed) {
      out << "  n=" << row.n << "  FAILED: " << row.error << '\n';
    } else {
      out << "  n=" << row.n << "  median " << row.median << " s  p10 " << row.p10 << "  p90 " << row.p90 << '\n';
    }
    out.flush();
  });
  std::ofstream csv = open_csv(args.csv, kBenchHeader);
  write_bench_csv(csv, report);
  out << "fitted log-log slope " << std::setprecision(4) << report.slope << '\n';
  return kExitOk;
}

struct CheckArgs {
  std::string suite = "all";
  std::uint64_t seed = 0;
  int permutations = 100;
};

int run_check(const CheckArgs& args, std::ostream& out, std::ostream& err) {
  CheckOptions options;
  options.seed = args.seed;
  options.permutations = args.permutations;
  std::vector<std::string> suites;
  if (args.suite == "all") {
    suites.assign(std::begin(kCheckSuites), std::end(kCheckSuites));
  } else {
    suites.push_back(args.suite);
  }
  bool ok = true;
  for (const auto& suite : suites) {
    const CheckReport report = run_checks(suite, options);
    const CheckCase* worst = nullptr;
    for (const auto& c : report.cases) {
      if (!c.passed) {
        err << "FAIL [" << suite << "] " << c.name << ": error " << c.error << " > tolerance " << c.tolerance
            << " (replay seed " << c.seed << ")";
        if (!c.detail.empty()) err << " " << c.detail;
        err << '\n';
      }
      const double r = c.tolerance > 0 ? c.error / c.tolerance : 0.0;
      if (worst == nullptr || r > (worst->tolerance > 0 ? worst->error / worst->tolerance : 0.0)) worst = &c;
    }
    out << suite << ": " << report.cases.size() << " cases, " << (report.passed() ? "passed" : "FAILED");
    if (worst != nullptr) {
      out << "; worst " << worst->name << " error " << std::setprecision(3) << worst->error << " (tolerance "
          << worst->tolerance << ")" << std::setprecision(6);
    }
    out << '\n';
    for (const auto& c : report.cases) {
      out << "  " << (c.passed ? "ok  " : "FAIL") << "  " << c.name << "  " << std::setprecision(3) << c.error
          << " / " << c.tolerance << std::setprecision(6) << '\n';
    }
    ok = ok && report.passed();
  }
  return ok ? kExitOk : kExitFailure;
}

struct GenArgs {
  std::string out;
  std::string csv;
  std::uint64_t seed = 0;
  bool large = false;
  std::optional<Index> n;
};

int run_gen(const GenArgs& args, std::ostream& out, std::ostream&) {
  const MogGenConfig cfg = args.large ? MogGenConfig::large_scale() : MogGenConfig{};
  Rng rng(args.seed);
  const MoGDataset ds = gen_synthetic_mog(rng, cfg, args.n);
  save_dataset(args.out, ds);
  if (!args.csv.empty()) {
    std::ofstream csv(args.csv);
    write_dataset_csv(csv, ds);
  }
  out << "wrote " << ds.points.rows() << " points, k=" << cfg.k << " to " << args.out << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Set Transformer training, evaluation, benchmarks and property checks", "settx"};
  app.require_subcommand(1);

  TrainArgs train_args;
  std::uint64_t train_seed = 0;
  auto* train_cmd = app.add_subcommand("train", "train a model from a config file");
  train_cmd->add_option("--config", train_args.config, "config file")->required()->check(CLI::ExistingFile);
  auto* train_seed_opt = train_cmd->add_option("--seed", train_seed, "overrides train.seed and STFM_SEED");
  train_cmd->add_option("--out", train_args.out, "output directory (default out.dir or runs/<name>)");

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint or the clustering oracle");
  eval_cmd->add_option("--model", eval_args.model, "checkpoint");
  eval_cmd->add_option("--task", eval_args.task, "max-regression or amortized-clustering")->required();
  eval_cmd->add_option("--datasets", eval_args.datasets, "number of fresh datasets")->capture_default_str()
      ->check(CLI::PositiveNumber);
  eval_cmd->add_option("--seed", eval_args.seed, "dataset seed")->capture_default_str();
  eval_cmd->add_flag("--oracle", eval_args.oracle, "score the generating parameters instead of a model");
  eval_cmd->add_option("--workers", eval_args.workers, "parallel evaluation threads")->capture_default_str()
      ->check(CLI::PositiveNumber);
  eval_cmd->add_option("--csv", eval_args.csv, "metrics CSV to append to")->capture_default_str();

  BenchArgs bench_args;
  auto* bench_cmd = app.add_subcommand("bench", "time one SAB or ISAB forward pass");
  bench_cmd->add_option("--block", bench_args.block, "sab or isab")->required();
  bench_cmd->add_option("--m", bench_args.m, "inducing points (isab)")->capture_default_str()
      ->check(CLI::PositiveNumber);
  bench_cmd->add_option("--sizes", bench_args.sizes, "set sizes, comma separated")->required()->delimiter(',');
  bench_cmd->add_option("--reps", bench_args.reps, "measured repetitions")->capture_default_str();
  bench_cmd->add_option("--seed", bench_args.seed, "parameter seed")->capture_default_str();
  bench_cmd->add_option("--csv", bench_args.csv, "raw timing CSV to append to")->capture_default_str();

  CheckArgs check_args;
  auto* check_cmd = app.add_subcommand("check", "run the property suites");
  check_cmd->add_option("--suite", check_args.suite, "grad, perm, lemma, em or all")->capture_default_str()
      ->check(CLI::IsMember({"grad", "perm", "lemma", "em", "all"}));
  check_cmd->add_option("--seed", check_args.seed, "master seed")->capture_default_str();
  check_cmd->add_option("--permutations", check_args.permutations, "permutations per architecture")
      ->capture_default_str()->check(CLI::PositiveNumber);

  GenArgs gen_args;
  Index gen_n = 0;
  auto* gen_cmd = app.add_subcommand("gen-data", "write one synthetic mixture dataset");
  gen_cmd->add_option("--out", gen_args.out, "MOGD binary output")->required();
  gen_cmd->add_option("--csv", gen_args.csv, "optional CSV export");
  gen_cmd->add_option("--seed", gen_args.seed, "seed")->capture_default_str();
  gen_cmd->add_flag("--large", gen_args.large, "large-scale variant (k=6, n up to 5000)");
  auto* gen_n_opt = gen_cmd->add_option("--n", gen_n, "fixed number of points")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (*train_cmd) {
      if (*train_seed_opt) train_args.seed = train_seed;
      return run_train(train_args, out, err);
    }
    if (*eval_cmd) return run_eval(eval_args, out, err);
    if (*bench_cmd) return run_bench_cmd(bench_args, out, err);
    if (*check_cmd) return run_check(check_args, out, err);
    if (*gen_cmd) {
      if (*gen_n_opt) gen_args.n = gen_n;
      return run_gen(gen_args, out, err);
    }
  } catch (const ConfigError& e) {
    err << "config error";
    if (!e.key().empty()) err << " [" << e.key() << "]";
    err << ": " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace settx
