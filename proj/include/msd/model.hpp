#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "msd/encoder.hpp"
#include "msd/momentum.hpp"

namespace msd {

/// The four contrastive streams of one step.
enum class LossStream : std::size_t { i2i = 0, t2t = 1, t2i = 2, i2t = 3 };

/// One shared temperature, or one per stream.
struct Temperatures {
  std::vector<TemperatureParam> params{TemperatureParam{}};

  static Temperatures shared(double tau = 0.07);
  static Temperatures per_stream(double tau = 0.07);

  bool is_shared() const noexcept { return params.size() == 1; }
  std::size_t index(LossStream s) const noexcept { return is_shared() ? 0 : static_cast<std::size_t>(s); }
  double tau(LossStream s) const { return params[index(s)].tau(); }

  friend bool operator==(const Temperatures&, const Temperatures&) = default;
};

struct ModelDims {
  std::vector<std::size_t> image_hidden{64, 64};
  std::vector<std::size_t> text_hidden{64, 64};
  std::size_t embedding = 32;
};

/// Everything a training step reads: both towers of both modalities, the
/// temperature(s) and the two momentum queues.
struct ModelState {
  MomentumPair image;
  MomentumPair text;
  Temperatures temps;
  MomentumQueue image_queue;
  MomentumQueue text_queue;

  static ModelState create(std::uint64_t seed, std::size_t image_dim, std::size_t text_dim, const ModelDims& dims,
                           std::size_t queue_capacity, bool shared_temperature = true);

  /// Trainable tensors (query towers and log-temperatures), in a fixed order.
  std::vector<std::pair<std::string, Tensor*>> trainable();
  std::vector<std::pair<std::string, const Tensor*>> trainable() const;
  /// EMA mirrors, in the same order as the tower part of trainable().
  std::vector<std::pair<std::string, Tensor*>> momentum();
  std::vector<std::pair<std::string, const Tensor*>> momentum() const;

  friend bool operator==(const ModelState&, const ModelState&) = default;
};

/// Gradients shaped like ModelState::trainable().
struct Gradients {
  EncoderParams image;
  EncoderParams text;
  std::vector<Tensor> log_tau;

  static Gradients zeros_like(const ModelState& state);
  std::vector<std::pair<std::string, Tensor*>> named();
  std::vector<std::pair<std::string, const Tensor*>> named() const;
};

}  // namespace msd
