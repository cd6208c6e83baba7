#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "msd/ablation.hpp"
#include "msd/cli.hpp"
#include "msd/config.hpp"
#include "msd/errors.hpp"
#include "msd/trainer.hpp"
#include "test_util.hpp"

using namespace msd;
using msd::testing::scratch_dir;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// FNV-1a, the content hash used for the determinism checks.
std::uint64_t content_hash(const fs::path& p) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : slurp(p)) h = (h ^ c) * 1099511628211ull;
  return h;
}

fs::path write_file(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
  return p;
}

const char* kTinyConfig = R"({
  "seed": 5,
  "gen": {"n": 200},
  "train": {"epochs": 2, "primary_batch": 16, "sub_batch": 4, "queue_capacity": 64,
            "image_hidden": [16], "text_hidden": [16], "embedding_dim": 8},
  "eval": {"probe_epochs": 50}
})";

}  // namespace

TEST_CASE("config parsing reports schema paths") {
  CHECK(parse_run_config(nlohmann::json::parse(R"({"seed": 1})")).train.epochs == 50);
  auto err = [](const char* text) {
    try {
      parse_run_config(nlohmann::json::parse(text));
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  CHECK(err("{}") == "$.seed: required");
  CHECK(err(R"({"seed": 1, "train": {"epochs": -1}})") == "$.train.epochs: expected a non-negative integer");
  CHECK(err(R"({"seed": 1, "train": {"epoch": 3}})") == "$.train.epoch: unknown key");
  CHECK(err(R"({"seed": 1, "colour": 3})") == "$.colour: unknown key");
  CHECK(err(R"({"seed": 1, "loss": {"mode": "moco"}})").rfind("$.loss.mode:", 0) == 0);
  CHECK(err(R"({"seed": 1, "train": {"primary_batch": 16, "sub_batch": 5}})").rfind("$.train:", 0) == 0);

  const RunConfig c = parse_run_config(nlohmann::json::parse(kTinyConfig));
  CHECK(c.gen.seed == 5);
  CHECK(c.train.seed == 5);
  CHECK(c.eval.probe.seed == 5);
  CHECK(parse_run_config(nlohmann::json::parse(to_json(c).dump())).train.hash() == c.train.hash());
}

TEST_CASE("gen-data exit codes and determinism") {
  const fs::path dir = scratch_dir("cli_gen");
  const fs::path cfg = write_file(dir / "c.json", kTinyConfig);
  const Run ok = cli({"gen-data", "--config", cfg.string(), "--out", (dir / "a.msdd").string()});
  CHECK(ok.code == 0);
  CHECK(fs::exists(dir / "a.msdd"));
  CHECK(cli({"gen-data", "--config", cfg.string(), "--out", (dir / "b.msdd").string()}).code == 0);
  CHECK(content_hash(dir / "a.msdd") == content_hash(dir / "b.msdd"));

  const fs::path bad = write_file(dir / "bad.json", R"({"seed": 1, "gen": {"classes": "five"}})");
  const Run b = cli({"gen-data", "--config", bad.string(), "--out", (dir / "x.msdd").string()});
  CHECK(b.code == 2);
  CHECK(b.err.find("$.gen.classes") != std::string::npos);
  CHECK(cli({"gen-data", "--config", write_file(dir / "j.json", "{oops").string(), "--out", "x"}).code == 2);
  CHECK(cli({"gen-data", "--config", (dir / "missing.json").string(), "--out", "x"}).code == 4);
  CHECK(cli({"bogus"}).code == 2);
  CHECK(cli({"gen-data"}).code == 2);
  CHECK(cli({"--help"}).code == 0);
}

TEST_CASE("train writes JSON lines, resumes, and signals failure") {
  const fs::path dir = scratch_dir("cli_train");
  const fs::path cfg = write_file(dir / "c.json", kTinyConfig);
  const std::string data = (dir / "d.msdd").string();
  REQUIRE(cli({"gen-data", "--config", cfg.string(), "--out", data}).code == 0);

  const Run r = cli({"train", "--config", cfg.string(), "--data", data, "--out", (dir / "run").string()});
  CHECK(r.code == 0);
  std::ifstream metrics(dir / "run" / "metrics.jsonl");
  std::size_t lines = 0, epochs = 0;
  for (std::string line; std::getline(metrics, line); ++lines) {
    const auto j = nlohmann::json::parse(line);  // throws on malformed lines
    CHECK(j.contains("loss"));
    epochs += j["kind"] == "epoch";
  }
  CHECK(lines == 2 * (160 / 16) + 2);
  CHECK(epochs == 2);

  // A second identical run gives identical artifacts.
  CHECK(cli({"train", "--config", cfg.string(), "--data", data, "--out", (dir / "run2").string()}).code == 0);
  CHECK(content_hash(dir / "run" / "metrics.jsonl") == content_hash(dir / "run2" / "metrics.jsonl"));
  CHECK(content_hash(dir / "run" / "checkpoint.msdc") == content_hash(dir / "run2" / "checkpoint.msdc"));

  // Interrupt after one epoch, then resume with the full budget.
  {
    const TrainState partial = [&] {
      const PairedDataset ds = read_dataset(data);
      Trainer t(load_run_config(cfg).train, ds);
      fs::create_directories(dir / "resumed");
      std::ofstream m(dir / "resumed" / "metrics.jsonl");
      t.run_epoch(&m);
      return t.state();
    }();
    save_checkpoint(partial, dir / "resumed" / "checkpoint.msdc");
  }
  CHECK(cli({"train", "--config", cfg.string(), "--data", data, "--out", (dir / "resumed").string(), "--resume"})
            .code == 0);
  CHECK(slurp(dir / "resumed" / "metrics.jsonl") == slurp(dir / "run" / "metrics.jsonl"));
  CHECK(slurp(dir / "resumed" / "checkpoint.msdc") == slurp(dir / "run" / "checkpoint.msdc"));

  const Run oh = cli({"train", "--config", cfg.string(), "--data", data, "--out", (dir / "oh").string(), "--mode",
                      "onehot"});
  CHECK(oh.code == 0);
  CHECK(slurp(dir / "oh" / "metrics.jsonl").find("\"mode\":\"onehot\"") != std::string::npos);
  CHECK(cli({"train", "--config", cfg.string(), "--data", data, "--out", (dir / "x").string(), "--mode", "moco"})
            .code == 2);

  const fs::path hot = write_file(dir / "hot.json", R"({"seed": 5, "gen": {"n": 200},
      "train": {"epochs": 2, "primary_batch": 16, "sub_batch": 4, "queue_capacity": 64, "base_lr": 1000,
                "image_hidden": [16], "text_hidden": [16], "embedding_dim": 8}})");
  const Run f = cli({"train", "--config", hot.string(), "--data", data, "--out", (dir / "hot").string()});
  CHECK(f.code == 3);
  CHECK(f.err.find("training_failed") != std::string::npos);
  CHECK(nlohmann::json::parse(slurp(dir / "hot" / "status.json"))["status"] == "training_failed");

  CHECK(cli({"train", "--config", cfg.string(), "--data", (dir / "none.msdd").string(), "--out",
             (dir / "y").string()})
            .code == 4);
}

TEST_CASE("eval on an untrained checkpoint is near chance, echoes config and is repeatable") {
  const fs::path dir = scratch_dir("cli_eval");
  const fs::path cfg = write_file(dir / "c.json", R"({"seed": 9})");
  const std::string data = (dir / "d.msdd").string();
  REQUIRE(cli({"gen-data", "--config", cfg.string(), "--out", data}).code == 0);
  TrainConfig tc;
  tc.seed = 9;
  save_checkpoint(TrainState::fresh(tc, 48, 40), dir / "fresh.msdc");

  const Run a = cli({"eval", "--checkpoint", (dir / "fresh.msdc").string(), "--data", data, "--out",
                     (dir / "a.json").string()});
  REQUIRE(a.code == 0);
  CHECK(a.out.find("R@1") != std::string::npos);
  const auto j = nlohmann::json::parse(slurp(dir / "a.json"));
  // Chance for R@1 is 1/400; for zero-shot accuracy 1/5 with binomial spread.
  CHECK(j["recall_at"]["1"].get<double>() <= 5.0 / 400.0);
  const double sigma = std::sqrt(0.2 * 0.8 / 400.0);
  CHECK(std::abs(j["zero_shot_accuracy"].get<double>() - 0.2) <= 4 * sigma);
  CHECK(j["seed"] == 9);
  CHECK(j["config"].contains("probe"));

  CHECK(cli({"eval", "--checkpoint", (dir / "fresh.msdc").string(), "--data", data, "--out",
             (dir / "b.json").string()})
            .code == 0);
  CHECK(slurp(dir / "a.json") == slurp(dir / "b.json"));

  write_file(dir / "junk.msdc", "not a checkpoint");
  CHECK(cli({"eval", "--checkpoint", (dir / "junk.msdc").string(), "--data", data, "--out",
             (dir / "c.json").string()})
            .code == 4);
}

TEST_CASE("grad-check and rfbe-check") {
  const Run g = cli({"grad-check", "--seed", "3"});
  CHECK(g.code == 0);
  CHECK(g.out.find("loss.msd") != std::string::npos);
  CHECK(g.out.find("tanh") != std::string::npos);
  const Run s = cli({"grad-check", "--sabotage"});
  CHECK(s.code == 1);
  CHECK(s.out.find("FAIL") != std::string::npos);

  const Run r = cli({"rfbe-check", "--N", "64", "--b-list", "8,64"});
  CHECK(r.code == 0);
  const auto j = nlohmann::json::parse(r.out);
  CHECK(j["passed"] == true);
  for (const auto& row : j["rows"]) {
    CHECK(row["max_grad_deviation"].get<double>() <= 1e-9);
    if (row["sub_batch"] == 64) CHECK(row["loss_deviation"].get<double>() == 0.0);
    if (row["sub_batch"] == 8) CHECK(row["rfbe_peak"] == row["rfbe_peak_at_double_batch"]);
  }
  CHECK(cli({"rfbe-check", "--N", "64", "--b-list", "7"}).code == 2);
  CHECK(cli({"rfbe-check", "--N", "16", "--mode", "end2end"}).code == 2);
}

TEST_CASE("ablation grid and table") {
  const AblationGrid def;
  const auto cells = def.cells(TrainConfig{});
  std::vector<std::pair<double, double>> msd_ratios;
  for (const auto& c : cells)
    if (c.mode == LossMode::msd && c.primary_batch == 512) msd_ratios.emplace_back(c.alpha, c.beta);
  CHECK(msd_ratios == std::vector<std::pair<double, double>>{{0, 1}, {0.3, 0.7}, {0.5, 0.5}, {0.7, 0.3}, {1, 0}});
  CHECK(std::count_if(cells.begin(), cells.end(), [](const auto& c) { return c.primary_batch == 16; }) == 7);
  CHECK(std::count_if(cells.begin(), cells.end(),
                      [](const auto& c) { return c.primary_batch == 512 && c.sub_batch == 16; }) == 6);
  CHECK(std::is_sorted(cells.begin(), cells.end()));

  CHECK_THROWS_AS(AblationGrid::from_json(nlohmann::json::parse(R"({"modez": []})")), ConfigError);
  CHECK_THROWS_AS(AblationGrid::from_json(nlohmann::json::parse(R"({"batches": [[16, 5]]})")).cells(TrainConfig{}),
                  ConfigError);

  const fs::path dir = scratch_dir("cli_ablate");
  const fs::path cfg = write_file(dir / "c.json", kTinyConfig);
  const std::string data = (dir / "d.msdd").string();
  REQUIRE(cli({"gen-data", "--config", cfg.string(), "--out", data}).code == 0);
  // Listed out of order on purpose, plus a cell that diverges.
  const fs::path grid = write_file(dir / "g.json", R"({"modes": ["onehot", "msd"], "batches": [[32, 8], [16, 4]],
      "ratios": [[0.7, 0.3], [0.3, 0.7]], "seeds": [1, 0], "epochs": 1})");
  const Run a = cli({"ablate", "--grid", grid.string(), "--data", data, "--out", (dir / "a").string(), "--config",
                     cfg.string(), "--jobs", "2"});
  REQUIRE(a.code == 0);
  std::vector<std::string> keys;
  std::istringstream table(a.out);
  std::string line;
  std::getline(table, line);
  std::getline(table, line);
  while (std::getline(table, line)) keys.push_back(line.substr(0, line.find(' ')));
  CHECK(keys.size() == 2 * 2 * 2 + 2 * 2);
  CHECK(keys.front() == "mode=msd|batch=16/4|alpha=0.3|beta=0.7|seed=0");
  CHECK(keys.back() == "mode=onehot|batch=32/8|alpha=-|beta=-|seed=1");

  // Same grid serially: identical table and CSV.
  const Run b = cli({"ablate", "--grid", grid.string(), "--data", data, "--out", (dir / "b").string(), "--config",
                     cfg.string()});
  CHECK(b.out == a.out);
  CHECK(slurp(dir / "a" / "ablation.csv") == slurp(dir / "b" / "ablation.csv"));

  const fs::path hot = write_file(dir / "hot.json", R"({"seed": 5, "gen": {"n": 200},
      "train": {"primary_batch": 16, "sub_batch": 4, "queue_capacity": 64, "base_lr": 1000,
                "image_hidden": [16], "text_hidden": [16], "embedding_dim": 8}})");
  const fs::path small = write_file(dir / "s.json", R"({"modes": ["msd", "onehot"], "batches": [[16, 4]],
      "ratios": [[0.3, 0.7]], "epochs": 1})");
  const Run f = cli({"ablate", "--grid", small.string(), "--data", data, "--out", (dir / "f").string(), "--config",
                     hot.string()});
  CHECK(f.code == 0);
  const auto j = nlohmann::json::parse(slurp(dir / "f" / "ablation.json"));
  CHECK(j["cells"].size() == 2);
  for (const auto& c : j["cells"]) CHECK(c["status"] == "training_failed");
}
