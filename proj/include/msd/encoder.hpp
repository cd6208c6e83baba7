#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "msd/autodiff.hpp"
#include "msd/tensor.hpp"

namespace msd {

struct Dense {
  Tensor weight;  // [d_in x d_out]
  Tensor bias;    // [d_out]

  friend bool operator==(const Dense&, const Dense&) = default;
};

/// Tanh MLP followed by a linear projection to the embedding width. The
/// query and momentum towers use the same structure so EMA works
/// coordinate-wise.
struct EncoderParams {
  std::vector<Dense> layers;
  Dense proj;

  std::size_t input_dim() const;
  std::size_t embedding_dim() const;

  /// Parameters in a fixed order, named "layers.<i>.weight", ..., "proj.bias".
  std::vector<std::pair<std::string, Tensor*>> named(const std::string& prefix = "");
  std::vector<std::pair<std::string, const Tensor*>> named(const std::string& prefix = "") const;

  friend bool operator==(const EncoderParams&, const EncoderParams&) = default;
};

/// Weights ~ U(-a, a) with a = sqrt(6 / (d_in + d_out)); biases zero.
/// `dims` lists the input width followed by each hidden width.
EncoderParams init_params(std::uint64_t seed, std::span<const std::size_t> dims, std::size_t embedding_dim);

EncoderParams zeros_like(const EncoderParams& params);

/// Encoder parameters placed on a tape, in EncoderParams::named() order.
struct BoundEncoder {
  std::vector<ad::Var> vars;
};

BoundEncoder bind(ad::Tape& tape, const EncoderParams& params, bool trainable);

/// Unit-norm embeddings, differentiable end to end.
ad::Var encode(const BoundEncoder& encoder, ad::Var inputs);

/// Gradient-free forward pass.
Tensor encode(const EncoderParams& params, const Tensor& inputs);

/// Adds the tape's gradients for a trainable binding into `grads`.
void accumulate_grads(const ad::Tape& tape, const BoundEncoder& encoder, EncoderParams& grads);

inline const double kDefaultLogTau = std::log(0.07);

/// Learnable temperature stored as its logarithm, so tau = exp(log_tau) > 0.
struct TemperatureParam {
  Tensor log_tau = Tensor::scalar(kDefaultLogTau);

  double tau() const { return std::exp(log_tau.item()); }
  friend bool operator==(const TemperatureParam&, const TemperatureParam&) = default;
};

/// exp(log_tau) recorded on the tape.
ad::Var temperature(ad::Var log_tau);

}  // namespace msd
