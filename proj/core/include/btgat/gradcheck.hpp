#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "btgat/autodiff.hpp"

namespace btgat {

/// Scalar-valued function of one tensor, evaluated on the supplied tape.
using TensorFunction = std::function<Var(Tape&, const Var&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  std::size_t checked = 0;
  bool passed = false;
};

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  /// Components with |analytic| and |numeric| both below this floor are compared
  /// against the floor instead of their own magnitude.
  double denom_floor = 1e-4;
  /// When nonzero, only this many components (seeded sample) are perturbed.
  std::size_t max_components = 0;
  std::uint64_t seed = 0;
};

/// Compares tape gradients with central finite differences.
/// Relative error per component: |a - n| / max(|a|, |n|, denom_floor).
GradCheckReport grad_check(const TensorFunction& f, const Tensor& point,
                           const GradCheckOptions& options);

inline GradCheckReport grad_check(const TensorFunction& f, const Tensor& point, double eps,
                                  double tol) {
  GradCheckOptions o;
  o.eps = eps;
  o.tol = tol;
  return grad_check(f, point, o);
}

}  // namespace btgat
