// SPDX-License-Identifier: Apache-2.0
#include "vqa/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace vqa::nn {

std::string_view to_string(Activation a) {
  switch (a) {
  case Activation::gated_tanh:
    return "gated_tanh";
  case Activation::gated_relu:
    return "gated_relu";
  case Activation::tanh:
    return "tanh";
  case Activation::relu:
    return "relu";
  }
  return "?";
}

std::string_view to_string(AttentionNorm n) {
  return n == AttentionNorm::softmax ? "softmax" : "sigmoid";
}

Activation parse_activation(std::string_view s) {
  for (auto a : {Activation::gated_tanh, Activation::gated_relu, Activation::tanh,
                 Activation::relu})
    if (s == to_string(a))
      return a;
  throw std::invalid_argument("unknown activation '" + std::string(s) + "'");
}

AttentionNorm parse_attention_norm(std::string_view s) {
  if (s == "softmax")
    return AttentionNorm::softmax;
  if (s == "sigmoid")
    return AttentionNorm::sigmoid;
  throw std::invalid_argument("unknown attention normalization '" + std::string(s) + "'");
}

Tensor glorot_uniform(std::size_t fan_out, std::size_t fan_in, Rng &rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t({fan_out, fan_in});
  for (auto &v : t.data())
    v = rng.uniform(-a, a);
  return t;
}

// LinearLayer ----------------------------------------------------------------

LinearLayer::LinearLayer(const std::string &name, std::size_t in, std::size_t out,
                         bool with_bias, Rng &rng)
    : weight(name + ".weight", glorot_uniform(out, in, rng)) {
  if (with_bias)
    bias.emplace(name + ".bias", Tensor({out}));
}

ad::Var LinearLayer::operator()(ad::Graph &g, ad::Var x) {
  if (bias)
    return ad::affine(x, g.param(weight), g.param(*bias));
  return ad::affine(x, g.param(weight));
}

void LinearLayer::collect(std::vector<Parameter *> &out) {
  out.push_back(&weight);
  if (bias)
    out.push_back(&*bias);
}

// NonLinearLayer -------------------------------------------------------------

NonLinearLayer::NonLinearLayer(const std::string &name, std::size_t in, std::size_t out,
                               Activation activation, Rng &rng)
    : weight(name + ".weight", glorot_uniform(out, in, rng)),
      bias(name + ".bias", Tensor({out})), activation_(activation) {
  if (activation == Activation::gated_tanh || activation == Activation::gated_relu) {
    gate_weight.emplace(name + ".gate_weight", glorot_uniform(out, in, rng));
    gate_bias.emplace(name + ".gate_bias", Tensor({out}));
  }
}

ad::Var NonLinearLayer::operator()(ad::Graph &g, ad::Var x) {
  auto pre = ad::affine(x, g.param(weight), g.param(bias));
  auto y = (activation_ == Activation::tanh || activation_ == Activation::gated_tanh)
               ? ad::tanh(pre)
               : ad::relu(pre);
  if (!gated())
    return y;
  auto gate = ad::sigmoid(ad::affine(x, g.param(*gate_weight), g.param(*gate_bias)));
  return ad::hadamard(y, gate);
}

void NonLinearLayer::collect(std::vector<Parameter *> &out) {
  out.push_back(&weight);
  out.push_back(&bias);
  if (gated()) {
    out.push_back(&*gate_weight);
    out.push_back(&*gate_bias);
  }
}

ad::Var gated_tanh(ad::Graph &g, NonLinearLayer &layer, ad::Var x) {
  if (layer.activation() != Activation::gated_tanh)
    throw std::invalid_argument("gated_tanh: layer was built with activation " +
                                std::string(to_string(layer.activation())));
  return layer(g, x);
}

// GRUCell --------------------------------------------------------------------

GRUCell::GRUCell(const std::string &name, std::size_t input_dim, std::size_t hidden_dim,
                 Rng &rng)
    : w_update(name + ".w_update", glorot_uniform(hidden_dim, input_dim, rng)),
      u_update(name + ".u_update", glorot_uniform(hidden_dim, hidden_dim, rng)),
      b_update(name + ".b_update", Tensor({hidden_dim})),
      w_reset(name + ".w_reset", glorot_uniform(hidden_dim, input_dim, rng)),
      u_reset(name + ".u_reset", glorot_uniform(hidden_dim, hidden_dim, rng)),
      b_reset(name + ".b_reset", Tensor({hidden_dim})),
      w_candidate(name + ".w_candidate", glorot_uniform(hidden_dim, input_dim, rng)),
      u_candidate(name + ".u_candidate", glorot_uniform(hidden_dim, hidden_dim, rng)),
      b_candidate(name + ".b_candidate", Tensor({hidden_dim})) {}

ad::Var GRUCell::step_projected(ad::Graph &g, ad::Var xz, ad::Var xr, ad::Var xh,
                                ad::Var h) {
  auto z = ad::sigmoid(ad::add(xz, ad::affine(h, g.param(u_update))));
  auto r = ad::sigmoid(ad::add(xr, ad::affine(h, g.param(u_reset))));
  auto cand = ad::tanh(ad::add(xh, ad::affine(ad::hadamard(r, h), g.param(u_candidate))));
  // (1 - z) ∘ h + z ∘ h~  ==  h + z ∘ (h~ - h)
  return ad::add(h, ad::hadamard(z, ad::sub(cand, h)));
}

ad::Var GRUCell::step(ad::Graph &g, ad::Var x, ad::Var h) {
  if (x.shape() != Shape{input_dim()} || h.shape() != Shape{hidden_dim()})
    throw ShapeError("gru_step: expected x " + to_string(Shape{input_dim()}) + " and h " +
                     to_string(Shape{hidden_dim()}) + ", got " + to_string(x.shape()) +
                     " and " + to_string(h.shape()));
  auto xz = ad::affine(x, g.param(w_update), g.param(b_update));
  auto xr = ad::affine(x, g.param(w_reset), g.param(b_reset));
  auto xh = ad::affine(x, g.param(w_candidate), g.param(b_candidate));
  return step_projected(g, xz, xr, xh, h);
}

std::vector<ad::Var> GRUCell::run(ad::Graph &g, ad::Var inputs, bool reverse) {
  const auto &shape = inputs.shape();
  if (shape.size() != 2 || shape[1] != input_dim())
    throw ShapeError("gru run: expected [T x " + std::to_string(input_dim()) + "], got " +
                     to_string(shape));
  const std::size_t steps = shape[0];
  // Input projections for all steps at once; the recurrence only adds U h.
  auto xz = ad::affine(inputs, g.param(w_update), g.param(b_update));
  auto xr = ad::affine(inputs, g.param(w_reset), g.param(b_reset));
  auto xh = ad::affine(inputs, g.param(w_candidate), g.param(b_candidate));
  auto h = g.constant(Tensor({hidden_dim()}));
  std::vector<ad::Var> states;
  states.reserve(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    const std::size_t t = reverse ? steps - 1 - i : i;
    h = step_projected(g, ad::row(xz, t), ad::row(xr, t), ad::row(xh, t), h);
    states.push_back(h);
  }
  return states;
}

void GRUCell::collect(std::vector<Parameter *> &out) {
  for (auto *p : {&w_update, &u_update, &b_update, &w_reset, &u_reset, &b_reset,
                  &w_candidate, &u_candidate, &b_candidate})
    out.push_back(p);
}

// EmbeddingTable -------------------------------------------------------------

EmbeddingTable::EmbeddingTable(const std::string &name, std::size_t vocab_size,
                               std::size_t dim, std::size_t pad_row, Rng &rng)
    : table(name + ".table", Tensor({vocab_size, dim})), pad_row_(pad_row) {
  if (pad_row >= vocab_size)
    throw std::invalid_argument("embedding pad row outside table");
  const double a = std::sqrt(3.0 / static_cast<double>(dim));
  for (std::size_t r = 0; r < vocab_size; ++r)
    for (auto &v : table.value.row(r))
      v = r == pad_row ? 0.0 : rng.uniform(-a, a);
  std::vector<bool> mask(vocab_size, true);
  mask[pad_row] = false;
  table.trainable_rows = std::move(mask);
}

ad::Var EmbeddingTable::lookup(ad::Graph &g, std::span<const int> ids) {
  return ad::gather_rows(g.param(table), ids);
}

void EmbeddingTable::collect(std::vector<Parameter *> &out) { out.push_back(&table); }

// Attention ------------------------------------------------------------------

Attention::Attention(const std::string &name, std::size_t feature_dim,
                     std::size_t query_dim, std::size_t hidden_dim, std::size_t heads,
                     AttentionNorm norm, Activation activation, Rng &rng)
    : feature_dim_(feature_dim), norm_(norm) {
  if (heads == 0)
    throw std::invalid_argument("attention needs at least one head");
  for (std::size_t h = 0; h < heads; ++h) {
    const auto prefix = name + ".head" + std::to_string(h);
    hidden_layers.emplace_back(prefix + ".f_a", feature_dim + query_dim, hidden_dim,
                               activation, rng);
    score_layers.emplace_back(prefix + ".w_a", hidden_dim, 1, false, rng);
  }
}

Attention::Output Attention::operator()(ad::Graph &g, ad::Var features, ad::Var query) {
  const auto &fs = features.shape();
  if (fs.size() != 2 || fs[1] != feature_dim_)
    throw ShapeError("attention: features must be [K x " + std::to_string(feature_dim_) +
                     "], got " + to_string(fs));
  const std::size_t K = fs[0];
  if (K == 0)
    throw std::invalid_argument("attention over zero regions");
  const auto expected_query = hidden_layers.front().in_features() - feature_dim_;
  if (query.shape() != Shape{expected_query})
    throw ShapeError("attention: query must be [" + std::to_string(expected_query) +
                     "], got " + to_string(query.shape()));

  auto joint = ad::concat(features, ad::tile_rows(query, K));
  Output out;
  std::optional<ad::Var> pooled;
  for (std::size_t h = 0; h < heads(); ++h) {
    auto hidden = hidden_layers[h](g, joint);
    auto scores = ad::reshape(score_layers[h](g, hidden), {K});
    auto alpha = norm_ == AttentionNorm::softmax ? ad::softmax(scores) : ad::sigmoid(scores);
    auto v = ad::reshape(ad::matmul(ad::reshape(alpha, {1, K}), features), {feature_dim_});
    out.weights.push_back(alpha);
    pooled = pooled ? ad::concat(*pooled, v) : v;
  }
  out.pooled = *pooled;
  return out;
}

void Attention::collect(std::vector<Parameter *> &out) {
  for (std::size_t h = 0; h < heads(); ++h) {
    hidden_layers[h].collect(out);
    score_layers[h].collect(out);
  }
}

} // namespace vqa::nn
