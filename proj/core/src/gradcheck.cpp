#include "btgat/gradcheck.hpp"

#include <cmath>
#include <numeric>

#include "btgat/random.hpp"

namespace btgat {

namespace {
double evaluate(const TensorFunction& f, const Tensor& x) {
  Tape tape;
  Var out = f(tape, Var(x));
  const double v = out.value().item();
  if (!std::isfinite(v)) throw NonFiniteError("grad_check: non-finite function value");
  return v;
}
}  // namespace

GradCheckReport grad_check(const TensorFunction& f, const Tensor& point,
                           const GradCheckOptions& options) {
  if (!(options.eps >= 1e-7 && options.eps <= 1e-3))
    throw std::invalid_argument("grad_check: eps must lie in [1e-7, 1e-3]");

  Tensor analytic;
  {
    Tape tape;
    Var x = tape.leaf(point);
    Var y = f(tape, x);
    if (y.value().size() != 1) throw ShapeError("grad_check: function must be scalar-valued");
    if (!y.requires_grad()) {
      analytic = Tensor(point.shape(), 0.0);
    } else {
      analytic = tape.backward(y)[x];
    }
  }

  std::vector<std::size_t> components(point.size());
  std::iota(components.begin(), components.end(), 0);
  if (options.max_components && options.max_components < components.size()) {
    Rng rng(options.seed);
    for (std::size_t i = 0; i < options.max_components; ++i)
      std::swap(components[i], components[i + rng.below(components.size() - i)]);
    components.resize(options.max_components);
  }

  GradCheckReport report;
  Tensor probe = point;
  for (std::size_t idx : components) {
    const double saved = probe[idx];
    probe[idx] = saved + options.eps;
    const double fp = evaluate(f, probe);
    probe[idx] = saved - options.eps;
    const double fm = evaluate(f, probe);
    probe[idx] = saved;
    const double numeric = (fp - fm) / (2.0 * options.eps);
    const double a = analytic[idx];
    const double denom = std::max({std::abs(a), std::abs(numeric), options.denom_floor});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > report.max_rel_error || report.checked == 0) {
      report.max_rel_error = rel;
      report.worst_index = idx;
      report.analytic_at_worst = a;
      report.numeric_at_worst = numeric;
    }
    ++report.checked;
  }
  report.passed = report.max_rel_error <= options.tol;
  return report;
}

}  // namespace btgat
