#pragma once

#include <functional>

namespace ssmlab {

struct QuadratureResult {
  double value = 0.0;
  double error_estimate = 0.0;
};

// Adaptive 15-point Gauss-Kronrod with interval bisection until the error
// estimate falls below rel_tol relative to the integral of |f|.
QuadratureResult integrate(const std::function<double(double)>& f, double lo, double hi,
                           double rel_tol = 1e-9);

}  // namespace ssmlab
