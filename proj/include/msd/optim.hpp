#pragma once

#include <cstdint>

#include "msd/tensor.hpp"

namespace msd {

struct AdamMoments {
  Tensor m;
  Tensor v;

  static AdamMoments zeros_like(const Tensor& param) { return {Tensor(param.shape(), 0.0), Tensor(param.shape(), 0.0)}; }
  friend bool operator==(const AdamMoments&, const AdamMoments&) = default;
};

/// One AdamW update with decoupled weight decay and bias-corrected moments:
///   w <- w - lr * wd * w - lr * m_hat / (sqrt(v_hat) + eps).
/// `t` is the 1-based step count.
void adamw_step(Tensor& param, const Tensor& grad, AdamMoments& moments, double lr, double beta1, double beta2,
                double eps, double weight_decay, std::uint64_t t);

/// 0.5 * base_lr * (1 + cos(pi * t / total)), annealing to zero at t = total.
double cosine_lr(std::uint64_t t, std::uint64_t total, double base_lr);

}  // namespace msd
