// SPDX-License-Identifier: Apache-2.0
#include "vqa/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace vqa {

Parameter::Parameter(std::string name, Tensor value, double lr_scale)
    : name(std::move(name)), value(std::move(value)), lr_scale(lr_scale) {
  gradient = Tensor(this->value.shape());
}

void Parameter::zero_grad() {
  if (gradient.shape() != value.shape())
    gradient = Tensor(value.shape());
  else
    gradient.fill(0.0);
}

void Parameter::mask_rows(Tensor &t) const {
  if (!trainable_rows)
    return;
  const auto width = row_width();
  auto data = t.data();
  for (std::size_t r = 0; r < trainable_rows->size(); ++r)
    if (!(*trainable_rows)[r])
      std::fill_n(data.begin() + static_cast<std::ptrdiff_t>(r * width), width, 0.0);
}

namespace ad {

Graph &Var::graph() const {
  if (!graph_)
    throw std::logic_error("use of an unbound Var");
  return *graph_;
}

const Tensor &Var::value() const { return graph().value(id_); }

Tensor Var::grad() const { return graph().grad(id_); }

Var Graph::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::param(Parameter &p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end())
    return Var(this, it->second);
  Node n;
  n.value = p.value;
  n.param = &p;
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  const auto id = nodes_.size() - 1;
  param_nodes_.emplace(&p, id);
  params_.push_back(&p);
  return Var(this, id);
}

Var Graph::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const auto &v : inputs) {
    if (&v.graph() != this)
      throw std::invalid_argument("operands belong to different graphs");
    n.inputs.push_back(v.id());
    n.needs_grad = n.needs_grad || nodes_[v.id()].needs_grad;
  }
  if (n.needs_grad)
    n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Tensor &Graph::grad_buffer(std::size_t id) {
  auto &n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape());
    n.has_grad = true;
  }
  return n.grad;
}

Tensor Graph::grad(std::size_t id) const {
  const auto &n = nodes_.at(id);
  return n.has_grad ? n.grad : Tensor(n.value.shape());
}

void Graph::backward(Var loss) {
  if (nodes_.empty() || !loss.valid())
    throw std::logic_error("backward() called before any forward pass");
  if (&loss.graph() != this)
    throw std::invalid_argument("backward(): loss belongs to another graph");
  if (value(loss.id()).size() != 1)
    throw ShapeError("backward() needs a scalar loss, got " +
                     to_string(value(loss.id()).shape()));

  for (auto &n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  grad_buffer(loss.id()).fill(1.0);

  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    auto &n = nodes_[i];
    if (!n.has_grad || !n.backward)
      continue;
    BackwardContext ctx{n.value, n.grad, {}, {}};
    ctx.in_values.reserve(n.inputs.size());
    ctx.in_grads.reserve(n.inputs.size());
    for (auto in : n.inputs) {
      ctx.in_values.push_back(&nodes_[in].value);
      ctx.in_grads.push_back(nodes_[in].needs_grad ? &grad_buffer(in) : nullptr);
    }
    n.backward(ctx);
  }

  for (const auto &[param, id] : param_nodes_) {
    param->gradient = grad(id);
    param->mask_rows(param->gradient);
  }
}

namespace {

Graph &same_graph(Var a, Var b, const char *op) {
  if (&a.graph() != &b.graph())
    throw std::invalid_argument(std::string(op) + ": operands belong to different graphs");
  return a.graph();
}

void require_rank(const Tensor &t, std::size_t rank, const char *op) {
  if (t.rank() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     ", got shape " + to_string(t.shape()));
}

template <typename F, typename D> Var unary(Var a, F f, D dfdy_dfdx) {
  const Tensor &x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i)
    y[i] = f(x[i]);
  return a.graph().record(std::move(y), {a}, [dfdy_dfdx](const BackwardContext &c) {
    if (!c.in_grads[0])
      return;
    auto &gx = *c.in_grads[0];
    const auto &x = *c.in_values[0];
    for (std::size_t i = 0; i < gx.size(); ++i)
      gx[i] += c.out_grad[i] * dfdy_dfdx(x[i], c.out_value[i]);
  });
}

} // namespace

double sigmoid(double x) {
  if (x >= 0.0)
    return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Var matmul(Var a, Var b) {
  auto &g = same_graph(a, b, "matmul");
  const Tensor &A = a.value();
  const Tensor &B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.rows())
    throw ShapeError("matmul: incompatible shapes " + to_string(A.shape()) + " and " +
                     to_string(B.shape()));
  const auto m = A.rows(), k = A.cols(), n = B.cols();
  Tensor Y({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A.at(i, p);
      const auto brow = B.row(p);
      auto yrow = Y.row(i);
      for (std::size_t j = 0; j < n; ++j)
        yrow[j] += aip * brow[j];
    }
  return g.record(std::move(Y), {a, b}, [m, k, n](const BackwardContext &c) {
    const auto &A = *c.in_values[0];
    const auto &B = *c.in_values[1];
    const auto &dY = c.out_grad;
    if (auto *dA = c.in_grads[0])
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j)
            s += dY.at(i, j) * B.at(p, j);
          dA->at(i, p) += s;
        }
    if (auto *dB = c.in_grads[1])
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A.at(i, p);
          for (std::size_t j = 0; j < n; ++j)
            dB->at(p, j) += aip * dY.at(i, j);
        }
  });
}

Var affine(Var x, Var weight, std::optional<Var> bias) {
  auto &g = same_graph(x, weight, "affine");
  const Tensor &X = x.value();
  const Tensor &W = weight.value();
  require_rank(W, 2, "affine weight");
  const auto n = W.rows(), m = W.cols();
  const bool batched = X.rank() == 2;
  if (!(X.rank() == 1 || batched) || (batched ? X.cols() : X.size()) != m)
    throw ShapeError("affine: input " + to_string(X.shape()) +
                     " incompatible with weight " + to_string(W.shape()));
  if (bias) {
    same_graph(x, *bias, "affine");
    if (bias->value().shape() != Shape{n})
      throw ShapeError("affine: bias " + to_string(bias->value().shape()) +
                       " incompatible with weight " + to_string(W.shape()));
  }
  const std::size_t K = batched ? X.rows() : 1;
  Tensor Y(batched ? Shape{K, n} : Shape{n});
  for (std::size_t k = 0; k < K; ++k) {
    const double *xr = X.data().data() + k * m;
    double *yr = Y.data().data() + k * n;
    for (std::size_t r = 0; r < n; ++r) {
      const auto wr = W.row(r);
      double s = bias ? bias->value()[r] : 0.0;
      for (std::size_t c = 0; c < m; ++c)
        s += wr[c] * xr[c];
      yr[r] = s;
    }
  }
  std::vector<Var> inputs{x, weight};
  if (bias)
    inputs.push_back(*bias);
  return g.record(std::move(Y), std::move(inputs), [K, n, m](const BackwardContext &c) {
    const auto &X = *c.in_values[0];
    const auto &W = *c.in_values[1];
    const double *dy = c.out_grad.data().data();
    if (auto *dX = c.in_grads[0])
      for (std::size_t k = 0; k < K; ++k) {
        double *dxr = dX->data().data() + k * m;
        for (std::size_t r = 0; r < n; ++r) {
          const double g = dy[k * n + r];
          if (g == 0.0)
            continue;
          const auto wr = W.row(r);
          for (std::size_t col = 0; col < m; ++col)
            dxr[col] += g * wr[col];
        }
      }
    if (auto *dW = c.in_grads[1])
      for (std::size_t k = 0; k < K; ++k) {
        const double *xr = X.data().data() + k * m;
        for (std::size_t r = 0; r < n; ++r) {
          const double g = dy[k * n + r];
          if (g == 0.0)
            continue;
          auto wr = dW->row(r);
          for (std::size_t col = 0; col < m; ++col)
            wr[col] += g * xr[col];
        }
      }
    if (c.in_grads.size() > 2 && c.in_grads[2]) {
      auto &db = *c.in_grads[2];
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t r = 0; r < n; ++r)
          db[r] += dy[k * n + r];
    }
  });
}

Var add(Var a, Var b) {
  auto &g = same_graph(a, b, "add");
  require_same_shape(a.value(), b.value(), "add");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i)
    y[i] += b.value()[i];
  return g.record(std::move(y), {a, b}, [](const BackwardContext &c) {
    for (auto *gi : c.in_grads)
      if (gi)
        for (std::size_t i = 0; i < gi->size(); ++i)
          (*gi)[i] += c.out_grad[i];
  });
}

Var sub(Var a, Var b) {
  auto &g = same_graph(a, b, "sub");
  require_same_shape(a.value(), b.value(), "sub");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i)
    y[i] -= b.value()[i];
  return g.record(std::move(y), {a, b}, [](const BackwardContext &c) {
    if (auto *ga = c.in_grads[0])
      for (std::size_t i = 0; i < ga->size(); ++i)
        (*ga)[i] += c.out_grad[i];
    if (auto *gb = c.in_grads[1])
      for (std::size_t i = 0; i < gb->size(); ++i)
        (*gb)[i] -= c.out_grad[i];
  });
}

Var hadamard(Var a, Var b) {
  auto &g = same_graph(a, b, "hadamard");
  require_same_shape(a.value(), b.value(), "hadamard");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i)
    y[i] *= b.value()[i];
  return g.record(std::move(y), {a, b}, [](const BackwardContext &c) {
    const auto &A = *c.in_values[0];
    const auto &B = *c.in_values[1];
    if (auto *ga = c.in_grads[0])
      for (std::size_t i = 0; i < ga->size(); ++i)
        (*ga)[i] += c.out_grad[i] * B[i];
    if (auto *gb = c.in_grads[1])
      for (std::size_t i = 0; i < gb->size(); ++i)
        (*gb)[i] += c.out_grad[i] * A[i];
  });
}

Var scale(Var a, double factor) {
  return unary(
      a, [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

Var tanh(Var a) {
  return unary(
      a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Var a) {
  return unary(
      a, [](double x) { return sigmoid(x); },
      [](double, double y) { return y * (1.0 - y); });
}

Var relu(Var a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var softmax(Var a) {
  const Tensor &x = a.value();
  require_rank(x, 1, "softmax");
  if (x.empty())
    throw std::invalid_argument("softmax of an empty vector");
  const double mx = *std::max_element(x.data().begin(), x.data().end());
  Tensor y(x.shape());
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = std::exp(x[i] - mx);
    z += y[i];
  }
  for (std::size_t i = 0; i < y.size(); ++i)
    y[i] /= z;
  return a.graph().record(std::move(y), {a}, [](const BackwardContext &c) {
    auto *gx = c.in_grads[0];
    if (!gx)
      return;
    const auto &y = c.out_value;
    double dot = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i)
      dot += c.out_grad[i] * y[i];
    for (std::size_t i = 0; i < y.size(); ++i)
      (*gx)[i] += y[i] * (c.out_grad[i] - dot);
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data())
    s += v;
  return a.graph().record(Tensor::scalar(s), {a}, [](const BackwardContext &c) {
    if (auto *gx = c.in_grads[0])
      for (auto &v : gx->data())
        v += c.out_grad[0];
  });
}

Var sum_rows(Var a) {
  const Tensor &x = a.value();
  require_rank(x, 2, "sum_rows");
  const auto K = x.rows(), n = x.cols();
  Tensor y({n});
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t j = 0; j < n; ++j)
      y[j] += x.at(k, j);
  return a.graph().record(std::move(y), {a}, [K, n](const BackwardContext &c) {
    if (auto *gx = c.in_grads[0])
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t j = 0; j < n; ++j)
          gx->at(k, j) += c.out_grad[j];
  });
}

Var concat(Var a, Var b) {
  auto &g = same_graph(a, b, "concat");
  const Tensor &A = a.value();
  const Tensor &B = b.value();
  if (A.rank() != B.rank() || A.rank() > 2)
    throw ShapeError("concat: rank mismatch " + to_string(A.shape()) + " and " +
                     to_string(B.shape()));
  if (A.rank() == 1) {
    std::vector<double> out(A.values());
    out.insert(out.end(), B.data().begin(), B.data().end());
    const auto na = A.size();
    return g.record(Tensor::vector(std::move(out)), {a, b}, [na](const BackwardContext &c) {
      if (auto *ga = c.in_grads[0])
        for (std::size_t i = 0; i < ga->size(); ++i)
          (*ga)[i] += c.out_grad[i];
      if (auto *gb = c.in_grads[1])
        for (std::size_t i = 0; i < gb->size(); ++i)
          (*gb)[i] += c.out_grad[na + i];
    });
  }
  if (A.rows() != B.rows())
    throw ShapeError("concat: row count mismatch " + to_string(A.shape()) + " and " +
                     to_string(B.shape()));
  const auto K = A.rows(), ca = A.cols(), cb = B.cols();
  Tensor Y({K, ca + cb});
  for (std::size_t k = 0; k < K; ++k) {
    std::copy(A.row(k).begin(), A.row(k).end(), Y.row(k).begin());
    std::copy(B.row(k).begin(), B.row(k).end(),
              Y.row(k).begin() + static_cast<std::ptrdiff_t>(ca));
  }
  return g.record(std::move(Y), {a, b}, [K, ca, cb](const BackwardContext &c) {
    for (std::size_t k = 0; k < K; ++k) {
      if (auto *ga = c.in_grads[0])
        for (std::size_t j = 0; j < ca; ++j)
          ga->at(k, j) += c.out_grad.at(k, j);
      if (auto *gb = c.in_grads[1])
        for (std::size_t j = 0; j < cb; ++j)
          gb->at(k, j) += c.out_grad.at(k, ca + j);
    }
  });
}

Var tile_rows(Var v, std::size_t count) {
  const Tensor &x = v.value();
  require_rank(x, 1, "tile_rows");
  if (count == 0)
    throw ShapeError("tile_rows: count must be positive");
  const auto n = x.size();
  Tensor Y({count, n});
  for (std::size_t k = 0; k < count; ++k)
    std::copy(x.data().begin(), x.data().end(), Y.row(k).begin());
  return v.graph().record(std::move(Y), {v}, [count, n](const BackwardContext &c) {
    if (auto *gx = c.in_grads[0])
      for (std::size_t k = 0; k < count; ++k)
        for (std::size_t j = 0; j < n; ++j)
          (*gx)[j] += c.out_grad.at(k, j);
  });
}

Var stack_rows(const std::vector<Var> &rows) {
  if (rows.empty())
    throw ShapeError("stack_rows: no rows");
  const auto n = rows.front().value().size();
  Tensor Y({rows.size(), n});
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const Tensor &x = rows[k].value();
    require_rank(x, 1, "stack_rows");
    if (x.size() != n)
      throw ShapeError("stack_rows: row " + std::to_string(k) + " has shape " +
                       to_string(x.shape()) + ", expected [" + std::to_string(n) + "]");
    std::copy(x.data().begin(), x.data().end(), Y.row(k).begin());
  }
  return rows.front().graph().record(std::move(Y), rows, [n](const BackwardContext &c) {
    for (std::size_t k = 0; k < c.in_grads.size(); ++k)
      if (auto *gx = c.in_grads[k])
        for (std::size_t j = 0; j < n; ++j)
          (*gx)[j] += c.out_grad.at(k, j);
  });
}

Var row(Var m, std::size_t r) {
  const Tensor &x = m.value();
  require_rank(x, 2, "row");
  if (r >= x.rows())
    throw std::out_of_range("row " + std::to_string(r) + " of " + to_string(x.shape()));
  const auto n = x.cols();
  const auto src = x.row(r);
  Tensor y = Tensor::vector(std::vector<double>(src.begin(), src.end()));
  return m.graph().record(std::move(y), {m}, [r, n](const BackwardContext &c) {
    if (auto *gx = c.in_grads[0])
      for (std::size_t j = 0; j < n; ++j)
        gx->at(r, j) += c.out_grad[j];
  });
}

Var gather_rows(Var table, std::span<const int> ids) {
  const Tensor &T = table.value();
  require_rank(T, 2, "gather_rows");
  if (ids.empty())
    throw ShapeError("gather_rows: empty index list");
  const auto V = T.rows(), w = T.cols();
  Tensor Y({ids.size(), w});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V)
      throw std::out_of_range("gather_rows: index " + std::to_string(ids[i]) +
                              " outside table of " + std::to_string(V) + " rows");
    const auto src = T.row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), Y.row(i).begin());
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return table.graph().record(
      std::move(Y), {table}, [idx = std::move(idx), w](const BackwardContext &c) {
        auto *gt = c.in_grads[0];
        if (!gt)
          return;
        for (std::size_t i = 0; i < idx.size(); ++i) {
          auto dst = gt->row(static_cast<std::size_t>(idx[i]));
          for (std::size_t j = 0; j < w; ++j)
            dst[j] += c.out_grad.at(i, j);
        }
      });
}

Var reshape(Var a, Shape shape) {
  Tensor y = a.value().reshaped(std::move(shape));
  return a.graph().record(std::move(y), {a}, [](const BackwardContext &c) {
    if (auto *gx = c.in_grads[0])
      for (std::size_t i = 0; i < gx->size(); ++i)
        (*gx)[i] += c.out_grad[i];
  });
}

} // namespace ad
} // namespace vqa
