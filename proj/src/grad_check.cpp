#include "gad/grad_check.hpp"

#include <cmath>
#include <limits>

namespace gad {

GradCheckReport grad_check(const NamedLeaves& leaves, const LossBuilder& build,
                           double eps) {
  Tape tape;
  Ctx ctx;
  ctx.tape = &tape;
  Tensor loss = build(ctx);
  Gradients grads = tape.backward(loss);

  GradCheckReport report;
  Ctx eval_ctx;  // no tape
  for (const auto& [name, leaf] : leaves) {
    const Tensor analytic = grads.grad(leaf);
    Arr& v = const_cast<Tensor&>(leaf).values();
    for (Index i = 0; i < leaf.size(); ++i) {
      const double saved = v[i];
      v[i] = saved + eps;
      const double lp = build(eval_ctx).scalar_value();
      v[i] = saved - eps;
      const double lm = build(eval_ctx).scalar_value();
      v[i] = saved;
      const double n = (lp - lm) / (2.0 * eps);
      const double a = analytic.values()[i];
      const double rel =
          std::abs(a - n) / std::max(1e-8, std::abs(a) + std::abs(n));
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_leaf = name;
        report.worst_coord = i;
        report.analytic = a;
        report.numeric = n;
      }
    }
  }
  return report;
}

double forward_margin(const LossBuilder& build) {
  double margin = std::numeric_limits<double>::infinity();
  Ctx ctx;
  ctx.margin = &margin;
  build(ctx);
  return margin;
}

}  // namespace gad
