#include "msd/cli.hpp"

#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "msd/ablation.hpp"
#include "msd/checks.hpp"
#include "msd/config.hpp"
#include "msd/dataset.hpp"
#include "msd/errors.hpp"
#include "msd/eval.hpp"
#include "msd/trainer.hpp"

namespace msd {

namespace {

namespace fs = std::filesystem;

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f || !(f << text)) throw IoError("cannot write " + path.string());
}

struct GenArgs {
  std::string config, out;
};
struct TrainArgs {
  std::string config, data, out, mode;
  bool resume = false;
};
struct EvalArgs {
  std::string checkpoint, data, out, config;
};
struct GradArgs {
  std::uint64_t seed = 0;
  std::size_t instances = 20;
  bool sabotage = false;
  std::string out;
};
struct RfbeArgs {
  std::size_t n = 64;
  std::vector<std::size_t> b_list;
  std::vector<std::string> modes{"msd", "onehot"};
  std::uint64_t seed = 0;
  std::string out;
};
struct AblateArgs {
  std::string grid, data, out, config;
  std::size_t jobs = 1;
  std::size_t epochs = 0;
};

int cmd_gen_data(const GenArgs& a, std::ostream& out) {
  const RunConfig cfg = load_run_config(a.config);
  const PairedDataset data = generate_dataset(cfg.gen);
  const fs::path path(a.out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_dataset(data, path);
  out << "wrote " << data.labels.size() << " pairs to " << a.out << '\n';
  return kExitOk;
}

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  RunConfig cfg = load_run_config(a.config);
  if (!a.mode.empty()) {
    cfg.train.loss.mode = parse_loss_mode(a.mode);
  }
  const TrainResult r = train(cfg.train, a.data, a.out, a.resume);
  if (r.status == TrainStatus::training_failed) {
    err << "training_failed after " << r.epochs_completed << " epochs: " << r.failure_reason << '\n';
    return kExitTrainingFailed;
  }
  out << to_string(r.status) << " after " << r.epochs_completed << " epochs, final epoch loss " << r.final_epoch_loss
      << '\n';
  return kExitOk;
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
  const PairedDataset data = read_dataset(a.data);
  EvalOptions opts;
  if (!a.config.empty()) {
    opts = load_run_config(a.config).eval;
  } else {
    opts.seed = ck.state.seed;
    opts.probe.seed = ck.state.seed;
  }
  const EvalReport rep = evaluate(ck.state.model, data, opts);
  write_text(a.out, rep.to_json().dump(2) + "\n");
  out << rep.table();
  return kExitOk;
}

int cmd_grad_check(const GradArgs& a, std::ostream& out) {
  const GradCheckReport rep = run_gradcheck_suite(a.seed, a.instances, a.sabotage);
  out << rep.table();
  if (!a.out.empty()) write_text(a.out, rep.to_json().dump(2) + "\n");
  out << (rep.passed() ? "gradient check passed\n" : "GRADIENT CHECK FAILED\n");
  return rep.passed() ? kExitOk : kExitCheckFailed;
}

int cmd_rfbe_check(const RfbeArgs& a, std::ostream& out) {
  std::vector<std::size_t> bs = a.b_list;
  if (bs.empty()) {
    for (std::size_t b = 1; b <= a.n; ++b)
      if (a.n % b == 0) bs.push_back(b);
  }
  for (std::size_t b : bs) {
    if (b == 0 || a.n % b != 0) {
      throw ConfigError("--b-list: " + std::to_string(b) + " does not divide N=" + std::to_string(a.n));
    }
  }
  std::vector<LossMode> modes;
  for (const auto& m : a.modes) modes.push_back(parse_loss_mode(m));
  const RfbeCheckReport rep = run_rfbe_check(a.n, bs, modes, a.seed);
  const std::string text = rep.to_json().dump(2) + "\n";
  out << text;
  if (!a.out.empty()) write_text(a.out, text);
  return rep.passed() ? kExitOk : kExitCheckFailed;
}

int cmd_ablate(const AblateArgs& a, std::ostream& out, std::ostream& err) {
  RunConfig base;
  if (!a.config.empty()) base = load_run_config(a.config);
  AblationGrid grid = a.grid.empty() ? AblationGrid{} : AblationGrid::load(a.grid);
  if (a.epochs > 0) grid.epochs = a.epochs;
  const AblationReport rep = run_ablation(grid, base, a.data, a.out, a.jobs);
  out << rep.table();
  for (const CellResult& r : rep.rows) {
    if (r.status == TrainStatus::training_failed) err << r.cell.key() << ": training_failed: " << r.failure_reason << '\n';
  }
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Momentum self-distillation training engine", "msd"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic paired dataset");
  gen_cmd->add_option("--config", gen.config, "Run config JSON")->required();
  gen_cmd->add_option("--out", gen.out, "Output dataset file")->required();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  train_cmd->add_option("--config", tr.config, "Run config JSON")->required();
  train_cmd->add_option("--data", tr.data, "Dataset file")->required();
  train_cmd->add_option("--out", tr.out, "Output directory")->required();
  train_cmd->add_option("--mode", tr.mode, "Loss mode, overrides the config")
      ->check(CLI::IsMember({"msd", "onehot", "end2end"}));
  train_cmd->add_flag("--resume", tr.resume, "Continue from the checkpoint in --out");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--data", ev.data, "Dataset file")->required();
  eval_cmd->add_option("--out", ev.out, "Report JSON path")->required();
  eval_cmd->add_option("--config", ev.config, "Run config JSON for eval options and seed");

  GradArgs gc;
  auto* grad_cmd = app.add_subcommand("grad-check", "Finite-difference gradient check of every op");
  grad_cmd->add_option("--seed", gc.seed, "Random seed");
  grad_cmd->add_option("--instances", gc.instances, "Random instances per op")->check(CLI::PositiveNumber);
  grad_cmd->add_flag("--sabotage", gc.sabotage, "Swap in a wrong tanh gradient (negative control)");
  grad_cmd->add_option("--out", gc.out, "Also write the report as JSON");

  RfbeArgs rc;
  auto* rfbe_cmd = app.add_subcommand("rfbe-check", "Compare sub-batched and monolithic steps");
  rfbe_cmd->add_option("--N", rc.n, "Primary batch size")->check(CLI::PositiveNumber);
  rfbe_cmd->add_option("--b-list", rc.b_list, "Sub-batch sizes (default: every divisor)")->delimiter(',');
  rfbe_cmd->add_option("--mode", rc.modes, "Loss modes")->delimiter(',')->check(CLI::IsMember({"msd", "onehot"}));
  rfbe_cmd->add_option("--seed", rc.seed, "Random seed");
  rfbe_cmd->add_option("--out", rc.out, "Also write the report to this file");

  AblateArgs ab;
  auto* ablate_cmd = app.add_subcommand("ablate", "Train and evaluate a grid of settings");
  ablate_cmd->add_option("--grid", ab.grid, "Grid JSON (default grid if omitted)");
  ablate_cmd->add_option("--data", ab.data, "Dataset file")->required();
  ablate_cmd->add_option("--out", ab.out, "Output directory")->required();
  ablate_cmd->add_option("--config", ab.config, "Base run config JSON");
  ablate_cmd->add_option("--jobs", ab.jobs, "Cells run in parallel")->check(CLI::PositiveNumber);
  ablate_cmd->add_option("--epochs", ab.epochs, "Override the grid's epoch budget");

  std::vector<const char*> argv{"msd"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen, out);
    if (*train_cmd) return cmd_train(tr, out, err);
    if (*eval_cmd) return cmd_eval(ev, out);
    if (*grad_cmd) return cmd_grad_check(gc, out);
    if (*rfbe_cmd) return cmd_rfbe_check(rc, out);
    if (*ablate_cmd) return cmd_ablate(ab, out, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << '\n';
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    err << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const NumericalError& e) {
    err << "training_failed: " << e.what() << '\n';
    return kExitTrainingFailed;
  } catch (const Error& e) {
    // Remaining library errors are argument or setup problems.
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  return kExitConfig;
}

}  // namespace msd
