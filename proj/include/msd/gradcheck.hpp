#pragma once

#include <functional>

#include "msd/tensor.hpp"

namespace msd {

using ScalarFn = std::function<double(const Tensor&)>;

/// Central-difference gradient estimate (f(x+eps) - f(x-eps)) / (2 eps),
/// one coordinate at a time. eps must lie in [1e-7, 1e-3].
Tensor finite_diff_grad(const ScalarFn& f, const Tensor& x, double eps = 1e-5);

}  // namespace msd
