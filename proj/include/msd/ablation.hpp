#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "msd/config.hpp"
#include "msd/losses.hpp"
#include "msd/trainer.hpp"

namespace msd {

/// One training run of a sweep. The alpha/beta ratio only matters in msd
/// mode; other modes carry the base config's values and print "-".
struct AblationCell {
  LossMode mode = LossMode::msd;
  std::size_t primary_batch = 16;
  std::size_t sub_batch = 16;
  double alpha = 0.3;
  double beta = 0.7;
  std::uint64_t seed = 0;
  std::size_t epochs = 20;

  /// "mode=msd|batch=512/16|alpha=0.3|beta=0.7|seed=0"
  std::string key() const;
  /// Ordering used for output: mode, batch, sub-batch, alpha, beta, seed.
  friend bool operator<(const AblationCell& a, const AblationCell& b);
};

struct AblationGrid {
  std::vector<LossMode> modes{LossMode::msd, LossMode::onehot, LossMode::end2end};
  std::vector<std::pair<std::size_t, std::size_t>> batches{{16, 16}, {256, 16}, {512, 16}};
  std::vector<std::pair<double, double>> ratios{{0.0, 1.0}, {0.3, 0.7}, {0.5, 0.5}, {0.7, 0.3}, {1.0, 0.0}};
  std::vector<std::uint64_t> seeds{0};
  std::size_t epochs = 20;

  /// Keys: modes, batches ([N, b] pairs), ratios ([alpha, beta] pairs), seeds,
  /// epochs. Missing keys keep the defaults; unknown keys are a ConfigError.
  static AblationGrid from_json(const nlohmann::json& doc);
  static AblationGrid load(const std::filesystem::path& path);

  /// Every cell, sorted. end2end cells run monolithically (b = N).
  /// ConfigError if a sub-batch does not divide its batch.
  std::vector<AblationCell> cells(const TrainConfig& base) const;
};

struct CellResult {
  AblationCell cell;
  TrainStatus status = TrainStatus::running;
  std::string failure_reason;
  std::size_t epochs_completed = 0;
  double final_epoch_loss = 0.0;
  bool evaluated = false;
  std::map<std::size_t, double> recall_at;
  double zero_shot_accuracy = 0.0;
  double zero_shot_auc = 0.0;
  double probe_auc = 0.0;

  /// Set for a converged alpha=1/beta=0 msd cell: that setting is expected to
  /// fail to train, so converging is worth pointing out.
  std::string note() const;
};

/// Trains one cell into `cell_dir` (metrics, checkpoint, status.json) and,
/// unless training failed, evaluates it (eval.json).
CellResult run_cell(const AblationCell& cell, const RunConfig& base, const std::filesystem::path& dataset_path,
                    const std::filesystem::path& cell_dir);

struct AblationReport {
  std::vector<std::size_t> recall_ks;
  std::vector<CellResult> rows;  // sorted by cell

  std::string table() const;
  std::string csv() const;
  nlohmann::ordered_json to_json() const;
};

/// Runs every cell, `jobs` at a time on worker threads. Cells share nothing
/// but the read-only dataset file. Writes ablation.txt, ablation.csv and
/// ablation.json under `out_dir`, one subdirectory per cell.
AblationReport run_ablation(const AblationGrid& grid, const RunConfig& base, const std::filesystem::path& dataset_path,
                            const std::filesystem::path& out_dir, std::size_t jobs = 1);

}  // namespace msd
