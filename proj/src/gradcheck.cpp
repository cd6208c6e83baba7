#include "msd/gradcheck.hpp"

#include <cmath>
#include <string>

#include "msd/errors.hpp"

namespace msd {

Tensor finite_diff_grad(const ScalarFn& f, const Tensor& x, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw ParameterError("finite-difference eps must be in [1e-7, 1e-3]");
  Tensor probe = x;
  Tensor grad(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double plus = f(probe);
    probe[i] = orig - eps;
    const double minus = f(probe);
    probe[i] = orig;
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      throw EvaluationError("objective is not finite near coordinate " + std::to_string(i));
    }
    grad[i] = (plus - minus) / (2.0 * eps);
  }
  return grad;
}

}  // namespace msd
