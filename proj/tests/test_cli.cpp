#include "settx/checkpoint.hpp"
#include "settx/cli.hpp"
#include "settx/data.hpp"

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace settx;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "settx");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

const std::string kConfig =
    "# tiny max regression run\n"
    "task = max-regression\nmodel.input_dim = 1\nmodel.dim = 8\nmodel.heads = 2\n"
    "model.encoder = fc:8, sab\nmodel.pool = pma:1\nmodel.head = fc:1\n"
    "train.steps = 20\ntrain.batch = 4\ntrain.lr = 1e-3\ntrain.seed = 1\n"
    "train.eval_every = 10\ntrain.eval_datasets = 10\n";

fs::path write_config(const fs::path& dir, const std::string& name, const std::string& text) {
  const fs::path p = dir / name;
  std::ofstream(p) << text;
  return p;
}

}  // namespace

TEST_CASE("train writes metrics, checkpoint and resolved config") {
  TempDir tmp("settx_cli_train");
  const auto cfg = write_config(tmp.path, "run.cfg", kConfig);
  const Run r = cli({"train", "--config", cfg.string(), "--out", (tmp.path / "a").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(fs::exists(tmp.path / "a" / "model.stfm"));
  CHECK(fs::exists(tmp.path / "a" / "resolved.cfg"));
  const std::string metrics = slurp(tmp.path / "a" / "metrics.csv");
  CHECK(metrics.rfind("step,loss,metric_name,metric_value,wall_s\n", 0) == 0);
  CHECK(metrics.find("\n20,") != std::string::npos);
  const KeyValues resolved = KeyValues::load(tmp.path / "a" / "resolved.cfg");
  CHECK(resolved.require("train.lr_decay_step") == "0");

  // Same seed, byte-identical checkpoint.
  REQUIRE(cli({"train", "--config", cfg.string(), "--out", (tmp.path / "b").string()}).code == 0);
  CHECK(slurp(tmp.path / "a" / "model.stfm") == slurp(tmp.path / "b" / "model.stfm"));

  // Metrics are appended, never truncated, and the header is written once.
  REQUIRE(cli({"train", "--config", cfg.string(), "--out", (tmp.path / "b").string()}).code == 0);
  const std::string twice = slurp(tmp.path / "b" / "metrics.csv");
  CHECK(twice.find("step,loss", 1) == std::string::npos);
  CHECK(twice.size() > metrics.size());
}

TEST_CASE("STFM_SEED overrides the config seed and --seed overrides both") {
  TempDir tmp("settx_cli_seed");
  const auto cfg = write_config(tmp.path, "run.cfg", kConfig);
  auto run = [&](const std::string& out, std::vector<std::string> extra) {
    std::vector<std::string> args{"train", "--config", cfg.string(), "--out", (tmp.path / out).string()};
    args.insert(args.end(), extra.begin(), extra.end());
    REQUIRE(cli(args).code == 0);
    return KeyValues::load(tmp.path / out / "resolved.cfg").require("train.seed");
  };
  ::setenv("STFM_SEED", "42", 1);
  CHECK(run("env", {}) == "42");
  CHECK(run("flag", {"--seed", "7"}) == "7");
  ::setenv("STFM_SEED", "abc", 1);
  CHECK(cli({"train", "--config", cfg.string(), "--out", (tmp.path / "bad").string()}).code == kExitConfig);
  ::unsetenv("STFM_SEED");
  CHECK(run("plain", {}) == "1");
}

TEST_CASE("bad configurations exit 2 and name the key") {
  TempDir tmp("settx_cli_badcfg");
  std::string missing = kConfig;
  missing.erase(missing.find("train.batch = 4\n"), 16);
  Run r = cli({"train", "--config", write_config(tmp.path, "m.cfg", missing).string(), "--out", tmp.path.string()});
  CHECK(r.code == kExitConfig);
  CHECK(r.err.find("train.batch") != std::string::npos);

  r = cli({"train", "--config", write_config(tmp.path, "u.cfg", kConfig + "train.warmup = 10\n").string(), "--out",
           tmp.path.string()});
  CHECK(r.code == kExitConfig);
  CHECK(r.err.find("train.warmup") != std::string::npos);

  r = cli({"train", "--config", write_config(tmp.path, "s.cfg", kConfig + "what is this\n").string(), "--out",
           tmp.path.string()});
  CHECK(r.code == kExitConfig);
  CHECK(r.err.find("line") != std::string::npos);
}

TEST_CASE("non-finite loss aborts and keeps the last checkpoint") {
  TempDir tmp("settx_cli_nan");
  std::string text = kConfig;
  text.replace(text.find("train.lr = 1e-3"), 15, "train.lr = 1e300");
  text.replace(text.find("train.eval_every = 10"), 21, "train.eval_every = 1");
  const Run r = cli({"train", "--config", write_config(tmp.path, "n.cfg", text).string(), "--out", tmp.path.string()});
  CHECK(r.code == kExitNonFinite);
  CHECK(r.err.find("non-finite") != std::string::npos);
  CHECK(fs::exists(tmp.path / "model.stfm"));
  CHECK_NOTHROW(load_checkpoint(tmp.path / "model.stfm"));
}

TEST_CASE("eval reports model and oracle metrics and appends CSV") {
  TempDir tmp("settx_cli_eval");
  const auto cfg = write_config(tmp.path, "run.cfg", kConfig);
  REQUIRE(cli({"train", "--config", cfg.string(), "--out", tmp.path.string()}).code == 0);
  const std::string model = (tmp.path / "model.stfm").string();
  const std::string csv = (tmp.path / "eval.csv").string();
  Run a = cli({"eval", "--model", model, "--task", "max-regression", "--datasets", "30", "--seed", "3", "--csv", csv});
  REQUIRE_MESSAGE(a.code == 0, a.err);
  CHECK(a.out.find("MAE") != std::string::npos);
  CHECK(a.out.find("±") != std::string::npos);
  Run b = cli({"eval", "--model", model, "--task", "max-regression", "--datasets", "30", "--seed", "3", "--csv", csv});
  CHECK(a.out == b.out);
  const std::string rows = slurp(csv);
  CHECK(rows.rfind("step,loss,metric_name,metric_value,wall_s\n", 0) == 0);
  CHECK(std::count(rows.begin(), rows.end(), '\n') == 5);

  Run wrong = cli({"eval", "--model", model, "--task", "amortized-clustering", "--csv", csv});
  CHECK(wrong.code == kExitFailure);
  CHECK(wrong.err.find("max-regression") != std::string::npos);

  Run oracle = cli({"eval", "--oracle", "--task", "amortized-clustering", "--datasets", "50", "--workers", "2",
                    "--csv", csv});
  REQUIRE_MESSAGE(oracle.code == 0, oracle.err);
  CHECK(oracle.out.find("LL0/data  -1.4") != std::string::npos);
  CHECK(oracle.out.find("ARI1") != std::string::npos);
}

TEST_CASE("bench, check and gen-data commands") {
  TempDir tmp("settx_cli_misc");
  const std::string csv = (tmp.path / "bench.csv").string();
  Run b = cli({"bench", "--block", "isab", "--m", "4", "--sizes", "16,32,64", "--reps", "5", "--csv", csv});
  REQUIRE_MESSAGE(b.code == 0, b.err);
  CHECK(b.out.find("fitted log-log slope") != std::string::npos);
  CHECK(slurp(csv).rfind("block,n,m,rep,seconds\nisab,16,4,0,", 0) == 0);
  CHECK(cli({"bench", "--block", "sab", "--sizes", "32,16", "--reps", "5", "--csv", csv}).code == kExitFailure);

  Run c = cli({"check", "--suite", "lemma"});
  CHECK(c.code == 0);
  CHECK(c.out.find("worst") != std::string::npos);
  CHECK(cli({"check", "--suite", "bogus"}).code != 0);

  const std::string data = (tmp.path / "d.mogd").string();
  Run g = cli({"gen-data", "--out", data, "--csv", (tmp.path / "d.csv").string(), "--seed", "4", "--n", "123"});
  REQUIRE(g.code == 0);
  CHECK(load_dataset(data).points.rows() == 123);
  CHECK(slurp(tmp.path / "d.csv").rfind("x0,x1,label\n", 0) == 0);

  CHECK(cli({}).code != 0);
  CHECK(cli({"train"}).code != 0);
}
