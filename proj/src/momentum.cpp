#include "msd/momentum.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "msd/errors.hpp"

namespace msd {

MomentumPair MomentumPair::mirrored(EncoderParams query) {
  EncoderParams key = query;
  return MomentumPair{std::move(query), std::move(key)};
}

void ema_update(const EncoderParams& query, EncoderParams& key, double m) {
  if (!(m >= 0.0 && m <= 1.0)) throw ParameterError("momentum coefficient must be in [0, 1]");
  const auto q = query.named();
  auto k = key.named();
  if (q.size() != k.size()) throw DimensionError("ema_update: towers have different layer counts");
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (q[i].second->shape() != k[i].second->shape()) {
      throw DimensionError("ema_update: shape mismatch at " + q[i].first);
    }
  }
  const double rest = 1.0 - m;
  for (std::size_t i = 0; i < q.size(); ++i) {
    const Tensor& src = *q[i].second;
    Tensor& dst = *k[i].second;
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = std::fma(m, dst[j], rest * src[j]);
  }
}

void ema_update(MomentumPair& pair, double m) { ema_update(pair.query, pair.key, m); }

std::size_t QueueSnapshot::row_of(std::uint64_t id) const {
  const auto it = index_of.find(id);
  if (it == index_of.end()) throw IndexError("sample id " + std::to_string(id) + " is not in the queue");
  return it->second;
}

MomentumQueue::MomentumQueue(std::size_t capacity, std::size_t dim)
    : capacity_(capacity), dim_(dim), ring_(capacity * dim, 0.0), id_ring_(capacity, 0) {
  if (capacity == 0 || dim == 0) throw CapacityError("queue capacity and dim must be positive");
}

void MomentumQueue::enqueue(const Tensor& keys, std::span<const std::uint64_t> ids) {
  if (keys.rank() != 2 || keys.cols() != dim_) {
    throw DimensionError("enqueue: expected keys of width " + std::to_string(dim_) + ", got " +
                         shape_string(keys.shape()));
  }
  const std::size_t b = keys.rows();
  if (ids.size() != b) throw DimensionError("enqueue: one id per key row required");
  if (b > capacity_) {
    throw CapacityError("enqueue of " + std::to_string(b) + " keys exceeds capacity " + std::to_string(capacity_));
  }
  for (std::size_t i = 0; i < b; ++i) {
    double sq = 0.0;
    for (double v : keys.row(i)) sq += v * v;
    if (std::abs(std::sqrt(sq) - 1.0) > 1e-9) {
      throw NormalizationError("enqueue: key row " + std::to_string(i) + " is not unit norm");
    }
  }
  for (std::size_t i = 0; i < b; ++i) {
    std::copy(keys.row(i).begin(), keys.row(i).end(), ring_.begin() + static_cast<std::ptrdiff_t>(head_ * dim_));
    id_ring_[head_] = ids[i];
    head_ = (head_ + 1) % capacity_;
  }
  fill_ = std::min(capacity_, fill_ + b);
}

QueueSnapshot MomentumQueue::snapshot() const {
  if (fill_ == 0) throw EmptyQueueError("snapshot of an empty queue");
  QueueSnapshot s;
  s.keys = Tensor(Shape{fill_, dim_});
  s.ids.resize(fill_);
  const std::size_t oldest = (head_ + capacity_ - fill_) % capacity_;
  for (std::size_t r = 0; r < fill_; ++r) {
    const std::size_t slot = (oldest + r) % capacity_;
    std::copy_n(ring_.begin() + static_cast<std::ptrdiff_t>(slot * dim_), dim_, s.keys.row(r).begin());
    s.ids[r] = id_ring_[slot];
    s.index_of[id_ring_[slot]] = r;  // later rows overwrite: newest wins
  }
  return s;
}

MomentumQueue MomentumQueue::restore(std::size_t capacity, std::size_t dim, std::vector<double> ring,
                                     std::vector<std::uint64_t> ids, std::size_t head, std::size_t fill) {
  MomentumQueue q(capacity, dim);
  if (ring.size() != capacity * dim || ids.size() != capacity || head >= capacity || fill > capacity) {
    throw DimensionError("inconsistent queue state");
  }
  q.ring_ = std::move(ring);
  q.id_ring_ = std::move(ids);
  q.head_ = head;
  q.fill_ = fill;
  return q;
}

}  // namespace msd
