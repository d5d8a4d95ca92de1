// SPDX-License-Identifier: Apache-2.0
#include "vqa/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace vqa::ad {

namespace {

double forward_loss(const GraphBuilder &builder) {
  Graph g;
  return builder(g).value().item();
}

} // namespace

GradCheckResult grad_check(const GraphBuilder &builder, double eps) {
  Graph g;
  Var loss = builder(g);
  const double base = loss.value().item();
  if (forward_loss(builder) != base)
    throw NondeterministicBuilder("grad_check: repeated forward passes disagree");
  g.backward(loss);

  GradCheckResult result;
  for (Parameter *p : g.parameters()) {
    const Tensor analytic = p->gradient;
    const auto width = p->row_width();
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      if (!p->row_trainable(i / width))
        continue;
      const double saved = p->value[i];
      p->value[i] = saved + eps;
      const double up = forward_loss(builder);
      p->value[i] = saved - eps;
      const double down = forward_loss(builder);
      p->value[i] = saved;

      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double err = std::abs(a - numeric) / denom;
      ++result.entries_checked;
      if (err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst_parameter = p->name;
        result.worst_index = i;
      }
    }
    p->gradient = analytic;
  }
  return result;
}

} // namespace vqa::ad
