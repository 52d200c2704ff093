#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "gad/ops.hpp"

namespace gad {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_leaf;
  Index worst_coord = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

using LossBuilder = std::function<Tensor(Ctx)>;
using NamedLeaves = std::vector<std::pair<std::string, Tensor>>;

// Compares tape gradients against central differences
//   (f(x+eps) - f(x-eps)) / (2 eps)
// per coordinate of every leaf. The builder must rebuild the forward pass
// from the current leaf values on every call and be free of lasting side
// effects (clone batch-norm state inside, keep dropout off).
// Relative error per coordinate: |a - n| / max(1e-8, |a| + |n|).
GradCheckReport grad_check(const NamedLeaves& leaves, const LossBuilder& build,
                           double eps = 1e-5);

// Smallest distance to a non-differentiable point (relu kink, max tie, knn
// boundary) seen during one forward pass; infinity when none apply. Callers
// re-sample inputs when this is within a few eps of zero.
double forward_margin(const LossBuilder& build);

}  // namespace gad
