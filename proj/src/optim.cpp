#include "msd/optim.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "msd/errors.hpp"

namespace msd {

void adamw_step(Tensor& param, const Tensor& grad, AdamMoments& moments, double lr, double beta1, double beta2,
                double eps, double weight_decay, std::uint64_t t) {
  if (t < 1) throw ParameterError("adamw_step: step count starts at 1");
  if (grad.shape() != param.shape() || moments.m.shape() != param.shape() || moments.v.shape() != param.shape()) {
    throw DimensionError("adamw_step: shape mismatch for parameter " + shape_string(param.shape()));
  }
  const double td = static_cast<double>(t);
  const double c1 = 1.0 - std::pow(beta1, td);
  const double c2 = 1.0 - std::pow(beta2, td);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    moments.m[i] = beta1 * moments.m[i] + (1.0 - beta1) * g;
    moments.v[i] = beta2 * moments.v[i] + (1.0 - beta2) * g * g;
    const double m_hat = moments.m[i] / c1;
    const double v_hat = moments.v[i] / c2;
    param[i] -= lr * weight_decay * param[i] + lr * m_hat / (std::sqrt(v_hat) + eps);
  }
}

double cosine_lr(std::uint64_t t, std::uint64_t total, double base_lr) {
  if (total == 0) throw ScheduleError("cosine schedule needs at least one step");
  if (t > total) throw ScheduleError("step " + std::to_string(t) + " is past the schedule end " + std::to_string(total));
  const double frac = static_cast<double>(t) / static_cast<double>(total);
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace msd
