#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "msd/losses.hpp"

namespace msd {

inline constexpr double kGradCheckTolerance = 1e-6;
inline constexpr double kGradCheckEps = 1e-5;

struct GradCheckEntry {
  std::string op;
  std::size_t instances = 0;
  double max_rel_error = 0.0;
  bool passed = false;
};

struct GradCheckReport {
  std::uint64_t seed = 0;
  double tolerance = kGradCheckTolerance;
  bool sabotaged = false;
  std::vector<GradCheckEntry> entries;

  bool passed() const;
  nlohmann::ordered_json to_json() const;
  std::string table() const;
};

/// Tape gradients of every differentiable op and composite loss against
/// central differences on random inputs in [-2, 2]. With `sabotage`, the tanh
/// entry is run through a deliberately wrong backward rule (negative control).
GradCheckReport run_gradcheck_suite(std::uint64_t seed, std::size_t instances = 20, bool sabotage = false);

struct RfbeCheckRow {
  LossMode mode = LossMode::msd;
  std::size_t sub_batch = 0;
  double max_grad_deviation = 0.0;  // max |g_rfbe - g_mono| / (1 + |g_mono|)
  double loss_deviation = 0.0;      // |L_rfbe - L_mono|
  std::size_t rfbe_peak = 0;
  std::size_t rfbe_peak_double_batch = 0;  // same b, primary batch 2N
  bool passed = false;
};

struct RfbeCheckReport {
  std::size_t primary_batch = 0;
  std::uint64_t seed = 0;
  double grad_tolerance = 1e-9;
  double loss_tolerance = 1e-12;
  std::size_t monolithic_peak = 0;
  std::vector<RfbeCheckRow> rows;

  bool passed() const;
  nlohmann::ordered_json to_json() const;
};

/// Compares run_rfbe_step with run_monolithic_step on a random model whose
/// queues are already full, for each sub-batch size and loss mode.
RfbeCheckReport run_rfbe_check(std::size_t primary_batch, std::span<const std::size_t> sub_batches,
                               std::span<const LossMode> modes, std::uint64_t seed);

}  // namespace msd
