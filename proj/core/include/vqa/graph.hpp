// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "vqa/tensor.hpp"

namespace vqa {

/**
 * A learned weight together with its gradient buffer.
 *
 * `lr_scale` multiplies the gradient before the optimizer sees it.
 * Rows whose `trainable_rows` entry is false never receive gradient.
 */
struct Parameter {
  Parameter() = default;
  Parameter(std::string name, Tensor value, double lr_scale = 1.0);

  std::string name;
  Tensor value;
  Tensor gradient;
  double lr_scale = 1.0;
  std::optional<std::vector<bool>> trainable_rows;

  bool row_trainable(std::size_t r) const {
    return !trainable_rows || (*trainable_rows)[r];
  }
  std::size_t row_count() const { return value.shape()[0]; }
  std::size_t row_width() const { return value.size() / value.shape()[0]; }

  void zero_grad();
  /// Zeroes rows of `t` (shaped like value) that are marked non-trainable.
  void mask_rows(Tensor &t) const;
};

namespace ad {

class Graph;

/// Handle to one node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
public:
  Var() = default;

  bool valid() const noexcept { return graph_ != nullptr; }
  Graph &graph() const;
  std::size_t id() const noexcept { return id_; }

  const Tensor &value() const;
  const Shape &shape() const { return value().shape(); }
  /// Gradient of the last backward() target with respect to this node
  /// (zeros when nothing flowed into it).
  Tensor grad() const;

private:
  friend class Graph;
  Var(Graph *graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph *graph_ = nullptr;
  std::size_t id_ = 0;
};

struct BackwardContext {
  const Tensor &out_value;
  const Tensor &out_grad;
  std::vector<const Tensor *> in_values;
  /// nullptr where the input does not need a gradient.
  std::vector<Tensor *> in_grads;
};

using BackwardFn = std::function<void(const BackwardContext &)>;

/**
 * Define-by-run tape. Nodes are appended in evaluation order, so reverse
 * insertion order is a valid topological order for backward(). Node storage
 * never relocates, so references returned by value() stay valid while the
 * graph lives.
 */
class Graph {
public:
  Graph() = default;
  Graph(const Graph &) = delete;
  Graph &operator=(const Graph &) = delete;

  Var constant(Tensor value);
  /// Registers a parameter; repeated calls return the same node.
  Var param(Parameter &p);

  /// Appends a node computed by a custom operation.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  /**
   * Computes d(loss)/d(node) for every node and writes the parameter
   * gradients (overwriting previous contents, masked rows zeroed).
   * May be called repeatedly; each call starts from clean node gradients.
   */
  void backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<Parameter *> &parameters() const noexcept { return params_; }

  const Tensor &value(std::size_t id) const { return nodes_.at(id).value; }
  Tensor grad(std::size_t id) const;

private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter *param = nullptr;
    bool needs_grad = false;
    bool has_grad = false;
  };

  Tensor &grad_buffer(std::size_t id);

  std::deque<Node> nodes_;
  std::vector<Parameter *> params_;
  std::unordered_map<Parameter *, std::size_t> param_nodes_;
};

// Linear algebra -------------------------------------------------------------

/// [m x k] * [k x n] -> [m x n].
Var matmul(Var a, Var b);

/**
 * Affine map with weight W [n x m] and optional bias b [n].
 * x [m] -> [n]; x [K x m] -> [K x n] with the same W, b applied per row.
 */
Var affine(Var x, Var weight, std::optional<Var> bias = std::nullopt);

// Element-wise ---------------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var a, double factor);
Var tanh(Var a);
Var sigmoid(Var a);
Var relu(Var a);

/// Numerically stable logistic function.
double sigmoid(double x);

// Reductions and reshaping ---------------------------------------------------

/// Softmax over a rank-1 tensor, max-subtracted.
Var softmax(Var a);
/// Sum of all elements as a [1] tensor.
Var sum(Var a);
/// Column sums of a [K x n] matrix -> [n].
Var sum_rows(Var a);
/// Rank-1: b appended after a. Rank-2: column-wise concatenation (equal rows).
Var concat(Var a, Var b);
/// [n] -> [count x n], every row a copy of v.
Var tile_rows(Var v, std::size_t count);
/// Equal-length vectors as the rows of a [rows.size() x n] matrix.
Var stack_rows(const std::vector<Var> &rows);
/// Row r of a matrix as a rank-1 tensor.
Var row(Var m, std::size_t r);
/// Rows of `table` at the given indices -> [ids.size() x width].
Var gather_rows(Var table, std::span<const int> ids);
Var reshape(Var a, Shape shape);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return hadamard(a, b); }

} // namespace ad
} // namespace vqa
