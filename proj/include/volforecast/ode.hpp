// Fixed-step classical RK4 integration of latent dynamics z' = f(z, t).
// Differentiable end-to-end: every stage is recorded on the autodiff graph,
// so backward() through the result unrolls all steps.
#pragma once

#include "volforecast/tensor.hpp"

namespace volf {

struct OdeDivergedError : std::runtime_error {
  int step_index;
  OdeDivergedError(int step, const std::string& msg) : std::runtime_error(msg), step_index(step) {}
};

template <typename T, typename VectorField>
Tensor<T> integrate_rk4(VectorField&& f, Tensor<T> z0, double t0, double t1, int steps) {
  if (steps < 1) throw std::invalid_argument("integrate_rk4: steps must be >= 1");
  if (t1 < t0) throw std::invalid_argument("integrate_rk4: t1 must be >= t0");
  if (t1 == t0) return z0;
  const double h = (t1 - t0) / steps;
  Tensor<T> z = std::move(z0);
  for (int s = 0; s < steps; ++s) {
    const double t = t0 + s * h;
    Tensor<T> k1 = f(z, t);
    Tensor<T> k2 = f(add(z, scale(k1, static_cast<T>(h / 2))), t + h / 2);
    Tensor<T> k3 = f(add(z, scale(k2, static_cast<T>(h / 2))), t + h / 2);
    Tensor<T> k4 = f(add(z, scale(k3, static_cast<T>(h))), t + h);
    Tensor<T> incr = add(add(k1, k4), scale(add(k2, k3), T(2)));
    z = add(z, scale(incr, static_cast<T>(h / 6)));
    if (!z.all_finite())
      throw OdeDivergedError(s, "integrate_rk4: non-finite state at step " + std::to_string(s));
  }
  return z;
}

}  // namespace volf
