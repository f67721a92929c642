#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "lmdepth/autodiff.hpp"

namespace lmdepth {

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step h_scale * max(1, |x_i|). Returns
/// max_i |analytic_i - numeric_i| / max(1, |numeric_i|).
template <class T>
double finite_diff_check(const std::function<Var<T>(const Var<T>&)>& f, const Tensor<T>& x,
                         double h_scale = 1e-4) {
  auto leaf = Var<T>::parameter(x);
  Var<T> y = f(leaf);
  if (y.size() != 1) throw ContractError("finite_diff_check: function must be scalar-valued");
  backward(y);
  const Tensor<T> analytic = leaf.grad_tensor();

  NoGradGuard no_grad;
  double worst = 0.0;
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = x[i];
    const T h = static_cast<T>(h_scale * std::max(1.0, std::abs(static_cast<double>(orig))));
    probe[i] = orig + h;
    const double fp = static_cast<double>(f(constant(probe)).item());
    probe[i] = orig - h;
    const double fm = static_cast<double>(f(constant(probe)).item());
    probe[i] = orig;
    // Divide by the step actually realized in floating point.
    const double step = static_cast<double>(orig + h) - static_cast<double>(orig - h);
    const double numeric = (fp - fm) / step;
    const double err = std::abs(static_cast<double>(analytic[i]) - numeric) / std::max(1.0, std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace lmdepth
