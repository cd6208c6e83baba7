#include "msd/ablation.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>
#include <tuple>

#include "msd/dataset.hpp"
#include "msd/errors.hpp"
#include "msd/eval.hpp"

namespace msd {

namespace {

using nlohmann::json;

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string fixed(double v, int digits = 4) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

bool uses_ratio(LossMode m) { return m == LossMode::msd; }

std::string dir_name(const AblationCell& c) {
  std::string s = std::string(to_string(c.mode)) + "_n" + std::to_string(c.primary_batch) + "b" +
                  std::to_string(c.sub_batch);
  if (uses_ratio(c.mode)) s += "_a" + num(c.alpha) + "b" + num(c.beta);
  return s + "_s" + std::to_string(c.seed);
}

template <typename T>
std::vector<T> pairs_from(const json& v, const char* path) {
  if (!v.is_array()) throw ConfigError(std::string(path) + ": expected an array of pairs");
  std::vector<T> out;
  for (const auto& e : v) {
    if (!e.is_array() || e.size() != 2 || !e[0].is_number() || !e[1].is_number()) {
      throw ConfigError(std::string(path) + ": expected an array of pairs");
    }
    out.emplace_back(e[0].get<typename T::first_type>(), e[1].get<typename T::second_type>());
  }
  return out;
}

}  // namespace

std::string AblationCell::key() const {
  const bool r = uses_ratio(mode);
  return "mode=" + std::string(to_string(mode)) + "|batch=" + std::to_string(primary_batch) + "/" +
         std::to_string(sub_batch) + "|alpha=" + (r ? num(alpha) : "-") + "|beta=" + (r ? num(beta) : "-") +
         "|seed=" + std::to_string(seed);
}

bool operator<(const AblationCell& a, const AblationCell& b) {
  return std::tie(a.mode, a.primary_batch, a.sub_batch, a.alpha, a.beta, a.seed) <
         std::tie(b.mode, b.primary_batch, b.sub_batch, b.alpha, b.beta, b.seed);
}

AblationGrid AblationGrid::from_json(const json& doc) {
  if (!doc.is_object()) throw ConfigError("$: expected an object");
  AblationGrid g;
  for (const auto& [key, v] : doc.items()) {
    const std::string path = "$." + key;
    if (key == "modes") {
      if (!v.is_array()) throw ConfigError(path + ": expected an array of strings");
      g.modes.clear();
      for (const auto& m : v) {
        if (!m.is_string()) throw ConfigError(path + ": expected an array of strings");
        try {
          g.modes.push_back(parse_loss_mode(m.get<std::string>()));
        } catch (const ConfigError& e) {
          throw ConfigError(path + ": " + e.what());
        }
      }
    } else if (key == "batches") {
      for (const auto& e : v) {
        if (e.is_array() && e.size() == 2 && !(e[0].is_number_unsigned() && e[1].is_number_unsigned())) {
          throw ConfigError(path + ": batch sizes must be non-negative integers");
        }
      }
      g.batches = pairs_from<std::pair<std::size_t, std::size_t>>(v, path.c_str());
    } else if (key == "ratios") {
      g.ratios = pairs_from<std::pair<double, double>>(v, path.c_str());
    } else if (key == "seeds") {
      if (!v.is_array()) throw ConfigError(path + ": expected an array of non-negative integers");
      g.seeds.clear();
      for (const auto& s : v) {
        if (!s.is_number_unsigned()) throw ConfigError(path + ": expected an array of non-negative integers");
        g.seeds.push_back(s.get<std::uint64_t>());
      }
    } else if (key == "epochs") {
      if (!v.is_number_unsigned() || v.get<std::size_t>() == 0) throw ConfigError(path + ": expected a positive integer");
      g.epochs = v.get<std::size_t>();
    } else {
      throw ConfigError(path + ": unknown key");
    }
  }
  if (g.modes.empty()) throw ConfigError("$.modes: must not be empty");
  if (g.batches.empty()) throw ConfigError("$.batches: must not be empty");
  if (g.seeds.empty()) throw ConfigError("$.seeds: must not be empty");
  if (g.ratios.empty() && std::count(g.modes.begin(), g.modes.end(), LossMode::msd)) {
    throw ConfigError("$.ratios: must not be empty when msd is swept");
  }
  return g;
}

AblationGrid AblationGrid::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read grid file " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("$: invalid JSON in " + path.string() + ": " + e.what());
  }
  return from_json(doc);
}

std::vector<AblationCell> AblationGrid::cells(const TrainConfig& base) const {
  std::vector<AblationCell> out;
  for (LossMode mode : modes) {
    for (auto [n, b] : batches) {
      if (n == 0 || b == 0 || n % b != 0) {
        throw ConfigError("$.batches: sub-batch " + std::to_string(b) + " does not divide " + std::to_string(n));
      }
      std::vector<std::pair<double, double>> rs = ratios;
      if (!uses_ratio(mode)) rs = {{base.loss.alpha, base.loss.beta}};
      for (auto [a, be] : rs) {
        for (std::uint64_t seed : seeds) {
          AblationCell c;
          c.mode = mode;
          c.primary_batch = n;
          c.sub_batch = mode == LossMode::end2end ? n : b;
          c.alpha = a;
          c.beta = be;
          c.seed = seed;
          c.epochs = epochs;
          out.push_back(c);
        }
      }
    }
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end(), [](const auto& x, const auto& y) { return x.key() == y.key(); }),
            out.end());
  return out;
}

std::string CellResult::note() const {
  if (cell.mode == LossMode::msd && cell.alpha == 1.0 && cell.beta == 0.0 && status == TrainStatus::converged) {
    return "converged although this ratio is expected to fail";
  }
  return "";
}

CellResult run_cell(const AblationCell& cell, const RunConfig& base, const std::filesystem::path& dataset_path,
                    const std::filesystem::path& cell_dir) {
  TrainConfig cfg = base.train;
  cfg.loss.mode = cell.mode;
  cfg.primary_batch = cell.primary_batch;
  cfg.sub_batch = cell.sub_batch;
  cfg.loss.alpha = cell.alpha;
  cfg.loss.beta = cell.beta;
  cfg.seed = cell.seed;
  cfg.epochs = cell.epochs;
  cfg.queue_capacity = std::max(cfg.queue_capacity, cell.primary_batch);
  cfg.validate();

  CellResult r;
  r.cell = cell;
  const TrainResult tr = train(cfg, dataset_path, cell_dir);
  r.status = tr.status;
  r.failure_reason = tr.failure_reason;
  r.epochs_completed = tr.epochs_completed;
  r.final_epoch_loss = tr.final_epoch_loss;
  if (tr.status == TrainStatus::training_failed) return r;

  const PairedDataset data = read_dataset(dataset_path);
  const LoadedCheckpoint ck = load_checkpoint(tr.checkpoint, cfg.hash());
  EvalOptions opts = base.eval;
  opts.seed = cell.seed;
  opts.probe.seed = cell.seed;
  opts.test_fraction = cfg.test_fraction;
  EvalReport rep = evaluate(ck.state.model, data, opts);
  rep.config["train_mode"] = std::string(to_string(cell.mode));
  std::ofstream(cell_dir / "eval.json") << rep.to_json().dump(2) << '\n';

  r.evaluated = true;
  r.recall_at = rep.recall_at;
  r.zero_shot_accuracy = rep.zero_shot_accuracy;
  r.zero_shot_auc = rep.zero_shot_macro_auc;
  r.probe_auc = rep.probe_auc;
  return r;
}

std::string AblationReport::table() const {
  std::vector<std::string> head{"cell", "status", "epochs", "loss"};
  for (std::size_t k : recall_ks) head.push_back("R@" + std::to_string(k));
  for (const char* h : {"zs_acc", "zs_auc", "probe_auc", "note"}) head.emplace_back(h);

  std::vector<std::vector<std::string>> body;
  for (const CellResult& r : rows) {
    std::vector<std::string> row{r.cell.key(), std::string(to_string(r.status)), std::to_string(r.epochs_completed),
                                 fixed(r.final_epoch_loss)};
    for (std::size_t k : recall_ks) row.push_back(r.evaluated ? fixed(r.recall_at.at(k)) : "-");
    row.push_back(r.evaluated ? fixed(r.zero_shot_accuracy) : "-");
    row.push_back(r.evaluated ? fixed(r.zero_shot_auc) : "-");
    row.push_back(r.evaluated ? fixed(r.probe_auc) : "-");
    row.push_back(r.note());
    body.push_back(std::move(row));
  }

  std::vector<std::size_t> width(head.size());
  for (std::size_t c = 0; c < head.size(); ++c) {
    width[c] = head[c].size();
    for (const auto& row : body) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& cells) {
    std::string s;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      s += cells[c];
      if (c + 1 < cells.size()) s += std::string(width[c] - cells[c].size() + 2, ' ');
    }
    while (!s.empty() && s.back() == ' ') s.pop_back();
    os << s << '\n';
  };
  line(head);
  std::size_t total = 0;
  for (std::size_t w : width) total += w + 2;
  os << std::string(total - 2, '-') << '\n';
  for (const auto& row : body) line(row);
  return os.str();
}

std::string AblationReport::csv() const {
  std::ostringstream os;
  os << "cell,mode,primary_batch,sub_batch,alpha,beta,seed,status,epochs,loss";
  for (std::size_t k : recall_ks) os << ",r_at_" << k;
  os << ",zs_acc,zs_auc,probe_auc,note\n";
  for (const CellResult& r : rows) {
    const AblationCell& c = r.cell;
    os << '"' << c.key() << "\"," << to_string(c.mode) << ',' << c.primary_batch << ',' << c.sub_batch << ','
       << num(c.alpha) << ',' << num(c.beta) << ',' << c.seed << ',' << to_string(r.status) << ','
       << r.epochs_completed << ',' << num(r.final_epoch_loss);
    for (std::size_t k : recall_ks) os << ',' << (r.evaluated ? num(r.recall_at.at(k)) : "");
    if (r.evaluated) {
      os << ',' << num(r.zero_shot_accuracy) << ',' << num(r.zero_shot_auc) << ',' << num(r.probe_auc);
    } else {
      os << ",,,";
    }
    os << ',' << r.note() << '\n';
  }
  return os.str();
}

nlohmann::ordered_json AblationReport::to_json() const {
  nlohmann::ordered_json cells = nlohmann::ordered_json::array();
  for (const CellResult& r : rows) {
    nlohmann::ordered_json j = {
        {"cell", r.cell.key()},
        {"mode", to_string(r.cell.mode)},
        {"primary_batch", r.cell.primary_batch},
        {"sub_batch", r.cell.sub_batch},
        {"alpha", r.cell.alpha},
        {"beta", r.cell.beta},
        {"seed", r.cell.seed},
        {"epochs", r.cell.epochs},
        {"status", to_string(r.status)},
        {"failure_reason", r.failure_reason},
        {"epochs_completed", r.epochs_completed},
        {"final_epoch_loss", r.final_epoch_loss},
    };
    if (r.evaluated) {
      nlohmann::ordered_json rec = nlohmann::ordered_json::object();
      for (const auto& [k, v] : r.recall_at) rec[std::to_string(k)] = v;
      j["recall_at"] = rec;
      j["zero_shot_accuracy"] = r.zero_shot_accuracy;
      j["zero_shot_macro_auc"] = r.zero_shot_auc;
      j["probe_macro_auc"] = r.probe_auc;
    }
    j["note"] = r.note();
    cells.push_back(std::move(j));
  }
  return {{"cells", cells}};
}

AblationReport run_ablation(const AblationGrid& grid, const RunConfig& base, const std::filesystem::path& dataset_path,
                            const std::filesystem::path& out_dir, std::size_t jobs) {
  const std::vector<AblationCell> cells = grid.cells(base.train);
  // Fail on an unreadable dataset before any thread starts.
  (void)read_dataset(dataset_path);
  std::filesystem::create_directories(out_dir);

  AblationReport report;
  report.recall_ks = base.eval.recall_ks;
  report.rows.resize(cells.size());

  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      try {
        report.rows[i] = run_cell(cells[i], base, dataset_path, out_dir / dir_name(cells[i]));
      } catch (const NumericalError& e) {
        // Recorded like any other failed cell; the sweep continues.
        report.rows[i].cell = cells[i];
        report.rows[i].status = TrainStatus::training_failed;
        report.rows[i].failure_reason = e.what();
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next = cells.size();
      }
    }
  };
  const std::size_t n_threads = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(cells.size(), 1));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);

  std::ofstream(out_dir / "ablation.txt") << report.table();
  std::ofstream(out_dir / "ablation.csv") << report.csv();
  std::ofstream(out_dir / "ablation.json") << report.to_json().dump(2) << '\n';
  return report;
}

}  // namespace msd
