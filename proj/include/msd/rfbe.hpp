#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

#include "msd/autodiff.hpp"
#include "msd/losses.hpp"
#include "msd/model.hpp"
#include "msd/momentum.hpp"

namespace msd {

/// One primary batch: two views per modality plus the sample ids.
struct Views {
  Tensor image_query;
  Tensor image_key;
  Tensor text_query;
  Tensor text_key;
  std::vector<std::uint64_t> ids;

  std::size_t size() const noexcept { return ids.size(); }
  /// Rows [begin, end).
  Views slice(std::size_t begin, std::size_t end) const;
};

/// Split of a primary batch of N rows into contiguous sub-batches of b rows.
struct RfbePlan {
  std::size_t primary_batch = 512;
  std::size_t sub_batch = 16;
  std::vector<std::pair<std::size_t, std::size_t>> phase1;  // [begin, end) ranges
  std::vector<std::pair<std::size_t, std::size_t>> phase2;

  /// PlanError unless 0 < b <= N and N % b == 0.
  static RfbePlan make(std::size_t primary_batch, std::size_t sub_batch);
  void validate() const;
};

/// Tracked-activation accounting: scalars held by gradient-tracked
/// intermediates on live tapes.
struct ActivationLedger {
  std::size_t current = 0;
  std::size_t peak = 0;
  std::size_t tapes_observed = 0;

  void observe(const ad::Tape& tape);
  void release(const ad::Tape& tape);
};

/// Peak tracked-activation count. StateError if no step has been measured.
std::size_t peak_tracked_activations(const ActivationLedger& ledger);

struct LossBreakdown {
  double i2i = 0.0;
  double t2t = 0.0;
  double t2i = 0.0;
  double i2t = 0.0;
  double uni = 0.0;
  double multi = 0.0;
  double total = 0.0;
};

/// Gradient-free outputs of phase 1, row-aligned with the primary batch.
struct PhaseOneKeys {
  Tensor image_keys;             // momentum image tower on image key views
  Tensor text_keys;              // momentum text tower on text key views
  Tensor image_momentum_query;   // momentum image tower on image query views
  Tensor text_momentum_query;    // momentum text tower on text query views

  PhaseOneKeys slice(std::size_t begin, std::size_t end) const;
};

struct StepResult {
  Gradients grads;
  LossBreakdown loss;
  ActivationLedger ledger;
  PhaseOneKeys keys;
};

/// Encodes keys sub-batch by sub-batch with the momentum towers and concatenates.
PhaseOneKeys compute_phase_one(const Views& batch, const RfbePlan& plan, const ModelState& state);

/// Loss of one slice of the primary batch against fixed queue snapshots.
/// When `grads` is given, backpropagates weight * total and adds into it.
LossBreakdown contrastive_sub_batch(const Views& sub, const PhaseOneKeys& sub_keys, const QueueSnapshot& image_queue,
                                    const QueueSnapshot& text_queue, const ModelState& state, const LossConfig& cfg,
                                    double weight, Gradients* grads, ActivationLedger* ledger);

/// Two-phase step: phase 1 encodes and enqueues all N keys; phase 2 runs the
/// query sub-batches against the full key set, accumulating gradients of
/// (|s| / N) * loss_s. Mutates only the queues; parameters are untouched.
StepResult run_rfbe_step(const Views& batch, const RfbePlan& plan, ModelState& state, const LossConfig& cfg);

/// Reference step: one forward/backward over the whole primary batch. In
/// end2end mode it ignores the queues and momentum towers.
StepResult run_monolithic_step(const Views& batch, ModelState& state, const LossConfig& cfg);

}  // namespace msd
