#pragma once

#include <cstdint>
#include <initializer_list>
#include <limits>

namespace msd {

std::uint64_t splitmix64(std::uint64_t x) noexcept;

/// Folds a list of integers into one stream id.
std::uint64_t stream_id(std::initializer_list<std::uint64_t> parts) noexcept;

/// Counter-based generator: draw i is a pure function of (seed, stream, i).
/// There is no hidden state beyond the counter, so any draw can be
/// reproduced by constructing a generator at the right position.
class CounterRng {
 public:
  using result_type = std::uint64_t;

  CounterRng(std::uint64_t seed, std::uint64_t stream = 0, std::uint64_t counter = 0) noexcept
      : key_(splitmix64(splitmix64(seed) ^ (stream + 0x632be59bd9b4e019ULL))), counter_(counter) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() noexcept { return splitmix64(key_ ^ splitmix64(counter_++)); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  /// Standard normal via Box-Muller; consumes two draws.
  double normal() noexcept;
  /// Uniform integer in [0, n); n > 0.
  std::uint64_t below(std::uint64_t n) noexcept;

  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_;
};

}  // namespace msd
