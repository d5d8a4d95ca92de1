// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "vqa/graph.hpp"

namespace vqa::ad {

/// Builds a fresh graph and returns its scalar loss node.
using GraphBuilder = std::function<Var(Graph &)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t entries_checked = 0;
};

class NondeterministicBuilder : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/**
 * Compares backward() against central differences for every entry of every
 * parameter the builder registers. Error per entry is
 * |analytic - numeric| / max(|analytic|, |numeric|, 1e-8); rows frozen by a
 * trainable-row mask are skipped.
 *
 * Throws NondeterministicBuilder when two forward passes at the same point
 * disagree.
 */
GradCheckResult grad_check(const GraphBuilder &builder, double eps = 1e-5);

} // namespace vqa::ad
