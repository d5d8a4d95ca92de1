// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vqa/graph.hpp"
#include "vqa/rng.hpp"

namespace vqa::nn {

using vqa::to_string;

enum class Activation { gated_tanh, gated_relu, tanh, relu };
enum class AttentionNorm { softmax, sigmoid };

std::string_view to_string(Activation a);
std::string_view to_string(AttentionNorm n);
Activation parse_activation(std::string_view s);
AttentionNorm parse_attention_norm(std::string_view s);

/// Uniform in [-a, a], a = sqrt(6 / (fan_in + fan_out)).
Tensor glorot_uniform(std::size_t fan_out, std::size_t fan_in, Rng &rng);

/// y = W x (+ b). Used bias-free for attention scores and answer classifiers.
class LinearLayer {
public:
  LinearLayer() = default;
  LinearLayer(const std::string &name, std::size_t in, std::size_t out, bool with_bias,
              Rng &rng);

  ad::Var operator()(ad::Graph &g, ad::Var x);

  std::size_t in_features() const { return weight.value.cols(); }
  std::size_t out_features() const { return weight.value.rows(); }
  void collect(std::vector<Parameter *> &out);

  Parameter weight;
  std::optional<Parameter> bias;
};

/**
 * Learned non-linear layer R^m -> R^n.
 *
 * gated_tanh:  y = tanh(W x + b) ∘ σ(W' x + b')
 * gated_relu:  y = relu(W x + b) ∘ σ(W' x + b')
 * tanh, relu:  y = act(W x + b), no gate parameters.
 *
 * Accepts a vector [m] or a batch of rows [K x m]; rows share weights.
 */
class NonLinearLayer {
public:
  NonLinearLayer() = default;
  NonLinearLayer(const std::string &name, std::size_t in, std::size_t out,
                 Activation activation, Rng &rng);

  ad::Var operator()(ad::Graph &g, ad::Var x);

  Activation activation() const { return activation_; }
  bool gated() const { return gate_weight.has_value(); }
  std::size_t in_features() const { return weight.value.cols(); }
  std::size_t out_features() const { return weight.value.rows(); }
  void collect(std::vector<Parameter *> &out);

  Parameter weight;
  Parameter bias;
  std::optional<Parameter> gate_weight;
  std::optional<Parameter> gate_bias;

private:
  Activation activation_ = Activation::gated_tanh;
};

/// Gated hyperbolic tangent: the layer must have been built with gated_tanh.
ad::Var gated_tanh(ad::Graph &g, NonLinearLayer &layer, ad::Var x);

/**
 * Gated recurrent unit with the reset gate applied inside the candidate:
 *
 *   z  = σ(W_z x + U_z h + b_z)
 *   r  = σ(W_r x + U_r h + b_r)
 *   h~ = tanh(W_h x + U_h (r ∘ h) + b_h)
 *   h' = (1 - z) ∘ h + z ∘ h~
 */
class GRUCell {
public:
  GRUCell() = default;
  GRUCell(const std::string &name, std::size_t input_dim, std::size_t hidden_dim, Rng &rng);

  ad::Var step(ad::Graph &g, ad::Var x, ad::Var h);

  /// Runs every row of `inputs` [T x input_dim] from a zero state and returns
  /// all T hidden states; `reverse` consumes the rows last-to-first.
  std::vector<ad::Var> run(ad::Graph &g, ad::Var inputs, bool reverse = false);

  std::size_t input_dim() const { return w_update.value.cols(); }
  std::size_t hidden_dim() const { return u_update.value.rows(); }
  void collect(std::vector<Parameter *> &out);

  Parameter w_update, u_update, b_update;
  Parameter w_reset, u_reset, b_reset;
  Parameter w_candidate, u_candidate, b_candidate;

private:
  ad::Var step_projected(ad::Graph &g, ad::Var xz, ad::Var xr, ad::Var xh, ad::Var h);
};

/// Word vectors with one reserved padding row that stays exactly zero.
class EmbeddingTable {
public:
  EmbeddingTable() = default;
  EmbeddingTable(const std::string &name, std::size_t vocab_size, std::size_t dim,
                 std::size_t pad_row, Rng &rng);

  /// [ids.size() x dim]; the padding row's gradient is always zero.
  ad::Var lookup(ad::Graph &g, std::span<const int> ids);

  std::size_t vocab_size() const { return table.value.rows(); }
  std::size_t dim() const { return table.value.cols(); }
  std::size_t pad_row() const { return pad_row_; }
  void collect(std::vector<Parameter *> &out);

  Parameter table;

private:
  std::size_t pad_row_ = 0;
};

/**
 * Question-guided attention over K region features.
 *
 * For each head, a_i = w_a · f_a([v_i, q]) with f_a and w_a shared over all
 * locations; weights are softmax(a) or σ(a_i) independently; the pooled
 * vector is Σ α_i v_i. Heads are concatenated.
 */
class Attention {
public:
  struct Output {
    ad::Var pooled;               ///< [heads * feature_dim]
    std::vector<ad::Var> weights; ///< one [K] vector per head
  };

  Attention() = default;
  Attention(const std::string &name, std::size_t feature_dim, std::size_t query_dim,
            std::size_t hidden_dim, std::size_t heads, AttentionNorm norm,
            Activation activation, Rng &rng);

  Output operator()(ad::Graph &g, ad::Var features, ad::Var query);

  std::size_t heads() const { return score_layers.size(); }
  std::size_t feature_dim() const { return feature_dim_; }
  AttentionNorm norm() const { return norm_; }
  void collect(std::vector<Parameter *> &out);

  std::vector<NonLinearLayer> hidden_layers; ///< f_a per head
  std::vector<LinearLayer> score_layers;     ///< w_a per head, [1 x hidden]

private:
  std::size_t feature_dim_ = 0;
  AttentionNorm norm_ = AttentionNorm::softmax;
};

} // namespace vqa::nn
