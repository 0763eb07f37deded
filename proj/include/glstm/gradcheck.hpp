#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "glstm/tensor.hpp"

namespace glstm {

using ScalarFunction = std::function<Tensor(const Tensor&)>;

struct FiniteDifferenceResult {
  double max_rel_error = 0.0;
  std::size_t worst_coordinate = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares the tape gradient of scalar `f` at `x` with central differences.
/// Per coordinate: |analytic - fd| / (|fd| + floor); the maximum is reported.
/// The default floor of 1e-12 gives the plain relative error. A larger floor
/// turns coordinates with near-zero gradient into an absolute comparison, where
/// central-difference roundoff (about eps * |f| / step) would otherwise dominate.
inline FiniteDifferenceResult finite_difference_report(const ScalarFunction& f, const Tensor& x,
                                                       double step, double floor = 1e-12) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_difference_check: step must be > 0");
  Tensor leaf = x.detach(true);
  Tensor y = f(leaf);
  if (!std::isfinite(y.item())) throw NumericError("finite_difference_check: f(x) is not finite");
  std::vector<double> analytic(x.size(), 0.0);
  if (y.requires_grad()) {
    auto grads = backpropagate(y);
    if (const auto* g = grads.find(leaf)) analytic = *g;
  }

  FiniteDifferenceResult out;
  std::vector<double> probe(x.values());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double fp = f(Tensor(x.shape(), probe)).item();
    probe[i] = orig - step;
    const double fm = f(Tensor(x.shape(), probe)).item();
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_difference_check: non-finite value at coordinate " +
                             std::to_string(i),
                         i);
    }
    const double fd = (fp - fm) / (2.0 * step);
    const double rel = std::fabs(analytic[i] - fd) / (std::fabs(fd) + floor);
    if (i == 0 || rel > out.max_rel_error) {
      out.max_rel_error = rel;
      out.worst_coordinate = i;
      out.analytic = analytic[i];
      out.numeric = fd;
    }
  }
  return out;
}

inline double finite_difference_check(const ScalarFunction& f, const Tensor& x, double step = 1e-5,
                                      double floor = 1e-12) {
  return finite_difference_report(f, x, step, floor).max_rel_error;
}

}  // namespace glstm
