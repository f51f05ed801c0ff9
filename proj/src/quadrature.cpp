#include "ssmlab/quadrature.hpp"

#include "ssmlab/common.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <cmath>
#include <queue>
#include <vector>

namespace ssmlab {

namespace {

struct Panel {
  double lo, hi, value, error, l1;
  bool operator<(const Panel& o) const { return error < o.error; }
};

Panel evaluate(const std::function<double(double)>& f, double lo, double hi) {
  Panel p{lo, hi, 0.0, 0.0, 0.0};
  // max_depth 0: a single Kronrod application with its embedded Gauss error
  // estimate. Boost reports that error on the reference interval [-1, 1]
  // without the (hi - lo) / 2 Jacobian, so it is rescaled here.
  p.value = boost::math::quadrature::gauss_kronrod<double, 15>::integrate(f, lo, hi, 0, 0.0,
                                                                          &p.error, &p.l1);
  p.error *= 0.5 * (hi - lo);
  return p;
}

}  // namespace

// Globally adaptive: always bisect the panel with the largest error. Boost's
// own recursion compares the unscaled panel error against a scaled tolerance
// and never stops refining near a steep endpoint such as 1 / (1 - x^2) at 1 - 1e-6.
QuadratureResult integrate(const std::function<double(double)>& f, double lo, double hi,
                           double rel_tol) {
  require(lo <= hi, "integrate: lower bound exceeds upper bound");
  if (lo == hi) return {};
  constexpr int kMaxPanels = 20000;
  std::priority_queue<Panel> heap;
  heap.push(evaluate(f, lo, hi));
  double value = heap.top().value;
  double error = heap.top().error;
  double l1 = heap.top().l1;
  int panels = 1;
  while (error > rel_tol * l1 && panels < kMaxPanels) {
    const Panel worst = heap.top();
    const double mid = 0.5 * (worst.lo + worst.hi);
    if (!(mid > worst.lo && mid < worst.hi)) break;  // cannot split further
    heap.pop();
    const Panel a = evaluate(f, worst.lo, mid);
    const Panel b = evaluate(f, mid, worst.hi);
    value += a.value + b.value - worst.value;
    error += a.error + b.error - worst.error;
    l1 += a.l1 + b.l1 - worst.l1;
    heap.push(a);
    heap.push(b);
    ++panels;
  }
  if (!std::isfinite(value)) throw NumericError("integrate: non-finite integral");
  // Re-sum to shed the drift of the running updates.
  QuadratureResult out;
  while (!heap.empty()) {
    out.value += heap.top().value;
    out.error_estimate += heap.top().error;
    heap.pop();
  }
  return out;
}

}  // namespace ssmlab
