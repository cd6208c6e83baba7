#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "msd/encoder.hpp"
#include "msd/tensor.hpp"

namespace msd {

inline constexpr double kDefaultMomentum = 0.995;
inline constexpr std::size_t kDefaultQueueCapacity = 4096;

/// Trainable query tower and its EMA mirror. The key tower is never placed
/// on a tape as a trainable leaf.
struct MomentumPair {
  EncoderParams query;
  EncoderParams key;

  /// Key tower starts as an exact copy of the query tower.
  static MomentumPair mirrored(EncoderParams query);

  friend bool operator==(const MomentumPair&, const MomentumPair&) = default;
};

/// key <- m * key + (1 - m) * query, coordinate-wise.
void ema_update(const EncoderParams& query, EncoderParams& key, double m);
void ema_update(MomentumPair& pair, double m);

/// Immutable copy of the queue contents, oldest row first.
struct QueueSnapshot {
  Tensor keys;
  std::vector<std::uint64_t> ids;
  /// Sample id -> row of its newest entry.
  std::unordered_map<std::uint64_t, std::size_t> index_of;

  std::size_t rows() const { return ids.size(); }
  /// Row of the newest key for `id`; IndexError if the id is not live.
  std::size_t row_of(std::uint64_t id) const;
};

/// Fixed-capacity FIFO ring of unit-norm key embeddings tagged with sample ids.
class MomentumQueue {
 public:
  /// Placeholder single-slot queue; real queues are built with a capacity.
  MomentumQueue() : MomentumQueue(1, 1) {}
  MomentumQueue(std::size_t capacity, std::size_t dim);

  /// Appends rows as the newest entries, evicting the oldest on overflow.
  void enqueue(const Tensor& keys, std::span<const std::uint64_t> ids);

  /// EmptyQueueError when nothing has been enqueued.
  QueueSnapshot snapshot() const;

  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t dim() const noexcept { return dim_; }
  std::size_t fill() const noexcept { return fill_; }
  std::size_t head() const noexcept { return head_; }

  // Raw ring state, for checkpointing.
  const std::vector<double>& ring() const noexcept { return ring_; }
  const std::vector<std::uint64_t>& id_ring() const noexcept { return id_ring_; }
  static MomentumQueue restore(std::size_t capacity, std::size_t dim, std::vector<double> ring,
                               std::vector<std::uint64_t> ids, std::size_t head, std::size_t fill);

  friend bool operator==(const MomentumQueue&, const MomentumQueue&) = default;

 private:
  std::size_t capacity_;
  std::size_t dim_;
  std::vector<double> ring_;
  std::vector<std::uint64_t> id_ring_;
  std::size_t head_ = 0;  // next slot to write
  std::size_t fill_ = 0;
};

}  // namespace msd
