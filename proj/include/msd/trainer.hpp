#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "msd/dataset.hpp"
#include "msd/losses.hpp"
#include "msd/model.hpp"
#include "msd/optim.hpp"
#include "msd/rfbe.hpp"

namespace msd {

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t primary_batch = 512;
  std::size_t sub_batch = 16;
  /// Fine-tuning large pretrained backbones uses 1e-6; randomly
  /// initialized MLPs on synthetic data need a larger rate.
  double base_lr = 1e-3;
  double momentum = 0.995;
  std::size_t queue_capacity = 4096;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  LossConfig loss;
  std::uint64_t seed = 0;
  ModelDims dims;
  bool shared_temperature = true;
  /// Trailing fraction of sample ids held out for evaluation.
  double test_fraction = 0.2;
  /// Augmentation parameters for the two views.
  GenConfig augmentation;

  void validate() const;
  /// Stable hash of every field, stored in checkpoints.
  std::uint64_t hash() const;
};

inline constexpr double kPretrainedBaseLr = 1e-6;

/// Number of leading sample ids used for training.
std::size_t train_split_size(std::size_t n, double test_fraction);

struct TrainState {
  ModelState model;
  std::vector<AdamMoments> moments;  // aligned with model.trainable()
  std::uint64_t seed = 0;
  std::uint64_t step = 0;   // primary batches processed
  std::uint64_t epoch = 0;  // epochs completed
  std::uint64_t optimizer_steps = 0;
  std::uint64_t ema_updates = 0;
  double initial_loss = 0.0;  // loss of the first step; 0 until one has run
  std::uint32_t epochs_over_threshold = 0;
  std::uint64_t config_hash = 0;

  static TrainState fresh(const TrainConfig& cfg, std::size_t image_dim, std::size_t text_dim);
  friend bool operator==(const TrainState&, const TrainState&) = default;
};

struct LoadedCheckpoint {
  TrainState state;
  std::vector<std::string> warnings;
};

/// "MSDC" file: header, named-tensor table, queue blocks, counters.
void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
/// FormatError on bad magic/version or a missing tensor (named in the message).
/// A config-hash mismatch against `expected_hash` only adds a warning.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, std::optional<std::uint64_t> expected_hash = {});

struct StepRecord {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  LossBreakdown loss;
  double tau = 0.0;
  double lr = 0.0;
};

/// One metrics line: {"kind","step","epoch","loss","loss_i2i","loss_t2t","loss_t2i","loss_i2t","tau","lr","mode"}.
std::string metrics_line(const char* kind, const StepRecord& r, LossMode mode);

enum class TrainStatus { running, converged, training_failed };
std::string_view to_string(TrainStatus status);

/// Builds the two augmented views of each sample in `ids` for a given step.
/// The image tower gets the original on one branch (chosen by a fair coin)
/// and an augmented view on the other; both text views are independent
/// augmentations.
Views make_views(const PairedDataset& data, std::span<const std::uint64_t> ids, const GenConfig& aug,
                 std::uint64_t seed, std::uint64_t epoch, std::uint64_t step);

/// Drives training epoch by epoch over the training split.
class Trainer {
 public:
  Trainer(TrainConfig cfg, const PairedDataset& data);
  Trainer(TrainConfig cfg, const PairedDataset& data, TrainState resumed);

  /// Runs one epoch, writing step lines then one epoch line to `metrics`
  /// (if given). Returns the status after the epoch.
  TrainStatus run_epoch(std::ostream* metrics = nullptr);

  const TrainState& state() const noexcept { return state_; }
  TrainState& state() noexcept { return state_; }
  const TrainConfig& config() const noexcept { return cfg_; }
  TrainStatus status() const noexcept { return status_; }
  const std::string& failure_reason() const noexcept { return failure_; }
  std::size_t steps_per_epoch() const noexcept { return steps_per_epoch_; }
  const std::vector<StepRecord>& history() const noexcept { return history_; }
  double last_epoch_loss() const noexcept { return last_epoch_loss_; }

 private:
  void fail(std::string reason);

  TrainConfig cfg_;
  const PairedDataset& data_;
  TrainState state_;
  RfbePlan plan_;
  std::size_t train_size_;
  std::size_t steps_per_epoch_;
  TrainStatus status_ = TrainStatus::running;
  std::string failure_;
  std::vector<StepRecord> history_;
  double last_epoch_loss_ = 0.0;
};

struct TrainResult {
  TrainStatus status = TrainStatus::running;
  std::string failure_reason;
  std::size_t epochs_completed = 0;
  double final_epoch_loss = 0.0;
  std::filesystem::path checkpoint;
  std::filesystem::path metrics;
};

/// Full run: writes metrics.jsonl, checkpoint.msdc (every epoch) and
/// status.json under `out_dir`. With `resume`, continues from the checkpoint there.
TrainResult train(const TrainConfig& cfg, const std::filesystem::path& dataset_path,
                  const std::filesystem::path& out_dir, bool resume = false);

}  // namespace msd
