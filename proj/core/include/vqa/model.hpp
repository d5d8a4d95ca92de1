// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "vqa/layers.hpp"

namespace vqa::model {

enum class QuestionEncoder { gru_forward, gru_backward, gru_2layer, bow_sum, bow_average };
enum class OutputHead { sigmoid_decomposed, sigmoid_single, softmax };

std::string_view to_string(QuestionEncoder e);
std::string_view to_string(OutputHead h);
QuestionEncoder parse_question_encoder(std::string_view s);
OutputHead parse_output_head(std::string_view s);

/// Architecture description; every ablation axis is a field here.
struct ModelConfig {
  std::size_t hidden_dim = 512;
  std::size_t embed_dim = 300;
  std::size_t feature_dim = 2048;
  std::size_t max_question_len = 14;
  std::size_t vocab_size = 0;  ///< question words, including pad and unknown rows
  std::size_t num_answers = 0; ///< N, the output vocabulary size
  QuestionEncoder question_encoder = QuestionEncoder::gru_forward;
  nn::Activation activation = nn::Activation::gated_tanh;
  OutputHead output_head = OutputHead::sigmoid_decomposed;
  std::size_t attention_heads = 1;
  nn::AttentionNorm attention_norm = nn::AttentionNorm::softmax;

  /// Throws std::invalid_argument describing the first invalid field.
  void validate() const;
  std::size_t query_dim() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json &j);

  friend bool operator==(const ModelConfig &, const ModelConfig &) = default;
};

inline constexpr int kPadToken = 0;
inline constexpr int kUnknownToken = 1;

inline constexpr double kTextClassifierLrScale = 0.5;
inline constexpr double kImageClassifierLrScale = 0.01;

struct Prediction {
  Tensor scores;          ///< [N]
  std::size_t answer = 0; ///< argmax, lowest index on ties
};

/// Index of the largest value; the lowest index wins ties.
std::size_t argmax(std::span<const double> values);

/**
 * The joint-embedding network: question encoder, top-down attention over
 * region features, Hadamard fusion, and the output classifier.
 */
class VqaModel {
public:
  struct ForwardOutput {
    ad::Var scores;                 ///< [N], sigmoid or softmax
    ad::Var logits;                 ///< [N], pre-normalization
    std::vector<ad::Var> attention; ///< per head, [K]
  };

  VqaModel(const ModelConfig &config, std::uint64_t seed);

  const ModelConfig &config() const noexcept { return config_; }

  /// All parameters in a fixed order (the checkpoint order).
  std::vector<Parameter *> parameters();
  std::vector<const Parameter *> parameters() const;
  Parameter *find_parameter(std::string_view name);

  /// Question vector q ([hidden_dim] for GRU encoders, [embed_dim] for bag-of-words).
  ad::Var encode_question(ad::Graph &g, std::span<const int> token_ids);

  ForwardOutput forward(ad::Graph &g, std::span<const int> token_ids, const Tensor &features);

  /// Forward pass on a private graph.
  Prediction predict(std::span<const int> token_ids, const Tensor &features);
  /// Same as predict() but also returns the attention weights of each head.
  Prediction predict(std::span<const int> token_ids, const Tensor &features,
                     std::vector<Tensor> &attention);

  nn::EmbeddingTable embedding;
  std::vector<nn::GRUCell> gru;
  nn::Attention attention;
  nn::NonLinearLayer f_q;
  nn::NonLinearLayer f_v;
  /// f_o_text / f_o_img for the decomposed head, f_o otherwise.
  nn::NonLinearLayer f_o_text;
  nn::NonLinearLayer f_o_img;
  nn::NonLinearLayer f_o;
  Parameter w_text; ///< [N x embed_dim], lr_scale 0.5
  Parameter w_img;  ///< [N x feature_dim], lr_scale 0.01
  Parameter w_o;    ///< [N x hidden_dim]

private:
  ModelConfig config_;
};

enum class ClassifierInit { copy, shuffle };

/**
 * Seeds rows of W_text / W_img from per-answer embeddings (sigmoid_decomposed
 * head only). Row j takes the entry for answers[j]; answers missing from a map
 * keep their random initialization. In shuffle mode the resulting rows are
 * then permuted: row j receives the row of answer perm[j], where perm is
 * Rng(shuffle_seed).permutation(N).
 */
void init_output_classifier(VqaModel &model, std::span<const std::string> answers,
                            const std::map<std::string, Tensor> &text_embeddings,
                            const std::map<std::string, Tensor> &visual_embeddings,
                            ClassifierInit mode = ClassifierInit::copy,
                            std::uint64_t shuffle_seed = 0);

/**
 * Initializes question word rows from pretrained vectors. Words without a
 * pretrained vector, and the unknown-word row, start at zero; the pad row
 * stays zero and frozen. `words[i]` names embedding row i.
 */
void init_word_embeddings(VqaModel &model, std::span<const std::string> words,
                          const std::map<std::string, Tensor> &pretrained);

// Checkpoints ----------------------------------------------------------------

/**
 * Binary container: "VQAC", u32 version (1), u32-length JSON header holding
 * {"config": ..., "metadata": ...}, u32 parameter count, then per parameter
 * a u32-length name, u32 rank, rank x u32 extents, and little-endian f64
 * values. Loading then saving reproduces the input bytes exactly.
 */
std::string save_checkpoint(const VqaModel &model,
                            const nlohmann::json &metadata = nlohmann::json::object());

struct LoadedCheckpoint {
  VqaModel model;
  nlohmann::json metadata;
};

LoadedCheckpoint load_checkpoint(std::string_view bytes);

} // namespace vqa::model
