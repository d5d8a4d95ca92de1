// SPDX-License-Identifier: Apache-2.0
#include "vqa/model.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

#include "vqa/binary_io.hpp"

namespace vqa::model {

using nlohmann::json;
using vqa::to_string;

std::string_view to_string(QuestionEncoder e) {
  switch (e) {
  case QuestionEncoder::gru_forward:
    return "gru_forward";
  case QuestionEncoder::gru_backward:
    return "gru_backward";
  case QuestionEncoder::gru_2layer:
    return "gru_2layer";
  case QuestionEncoder::bow_sum:
    return "bow_sum";
  case QuestionEncoder::bow_average:
    return "bow_average";
  }
  return "?";
}

std::string_view to_string(OutputHead h) {
  switch (h) {
  case OutputHead::sigmoid_decomposed:
    return "sigmoid_decomposed";
  case OutputHead::sigmoid_single:
    return "sigmoid_single";
  case OutputHead::softmax:
    return "softmax";
  }
  return "?";
}

QuestionEncoder parse_question_encoder(std::string_view s) {
  for (auto e : {QuestionEncoder::gru_forward, QuestionEncoder::gru_backward,
                 QuestionEncoder::gru_2layer, QuestionEncoder::bow_sum,
                 QuestionEncoder::bow_average})
    if (s == to_string(e))
      return e;
  throw std::invalid_argument("unknown question encoder '" + std::string(s) + "'");
}

OutputHead parse_output_head(std::string_view s) {
  for (auto h : {OutputHead::sigmoid_decomposed, OutputHead::sigmoid_single,
                 OutputHead::softmax})
    if (s == to_string(h))
      return h;
  throw std::invalid_argument("unknown output head '" + std::string(s) + "'");
}

// ModelConfig ----------------------------------------------------------------

namespace {

bool is_bow(QuestionEncoder e) {
  return e == QuestionEncoder::bow_sum || e == QuestionEncoder::bow_average;
}

void require_positive(std::size_t v, const char *field) {
  if (v == 0)
    throw std::invalid_argument(std::string("model config: ") + field + " must be positive");
}

} // namespace

void ModelConfig::validate() const {
  require_positive(hidden_dim, "hidden_dim");
  require_positive(embed_dim, "embed_dim");
  require_positive(feature_dim, "feature_dim");
  require_positive(max_question_len, "max_question_len");
  require_positive(num_answers, "num_answers");
  if (vocab_size < 2)
    throw std::invalid_argument(
        "model config: vocab_size must be at least 2 (padding and unknown-word rows)");
  if (attention_heads != 1 && attention_heads != 2)
    throw std::invalid_argument("model config: attention_heads must be 1 or 2, got " +
                                std::to_string(attention_heads));
}

std::size_t ModelConfig::query_dim() const {
  return is_bow(question_encoder) ? embed_dim : hidden_dim;
}

json ModelConfig::to_json() const {
  return json{{"hidden_dim", hidden_dim},
              {"embed_dim", embed_dim},
              {"feature_dim", feature_dim},
              {"max_question_len", max_question_len},
              {"vocab_size", vocab_size},
              {"num_answers", num_answers},
              {"question_encoder", to_string(question_encoder)},
              {"activation", nn::to_string(activation)},
              {"output_head", to_string(output_head)},
              {"attention_heads", attention_heads},
              {"attention_norm", nn::to_string(attention_norm)}};
}

ModelConfig ModelConfig::from_json(const json &j) {
  if (!j.is_object())
    throw std::invalid_argument("model config must be a JSON object");
  static const std::set<std::string> known = {
      "hidden_dim",  "embed_dim",        "feature_dim", "max_question_len",
      "vocab_size",  "num_answers",      "question_encoder", "activation",
      "output_head", "attention_heads", "attention_norm"};
  for (const auto &[key, _] : j.items())
    if (!known.contains(key))
      throw std::invalid_argument("model config: unknown key '" + key + "'");

  ModelConfig c;
  auto size_field = [&](const char *key, std::size_t &out) {
    if (!j.contains(key))
      return;
    const auto &v = j.at(key);
    if (!v.is_number_unsigned())
      throw std::invalid_argument(std::string("model config: ") + key +
                                  " must be a non-negative integer");
    out = v.get<std::size_t>();
  };
  auto text_field = [&](const char *key) -> std::optional<std::string> {
    if (!j.contains(key))
      return std::nullopt;
    if (!j.at(key).is_string())
      throw std::invalid_argument(std::string("model config: ") + key + " must be a string");
    return j.at(key).get<std::string>();
  };
  size_field("hidden_dim", c.hidden_dim);
  size_field("embed_dim", c.embed_dim);
  size_field("feature_dim", c.feature_dim);
  size_field("max_question_len", c.max_question_len);
  size_field("vocab_size", c.vocab_size);
  size_field("num_answers", c.num_answers);
  size_field("attention_heads", c.attention_heads);
  if (auto s = text_field("question_encoder"))
    c.question_encoder = parse_question_encoder(*s);
  if (auto s = text_field("activation"))
    c.activation = nn::parse_activation(*s);
  if (auto s = text_field("output_head"))
    c.output_head = parse_output_head(*s);
  if (auto s = text_field("attention_norm"))
    c.attention_norm = nn::parse_attention_norm(*s);
  c.validate();
  return c;
}

std::size_t argmax(std::span<const double> values) {
  if (values.empty())
    throw std::invalid_argument("argmax of an empty score vector");
  // max_element returns the first maximum, which is the lowest index.
  return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) -
                                  values.begin());
}

// VqaModel -------------------------------------------------------------------

VqaModel::VqaModel(const ModelConfig &config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const auto &c = config_;
  Rng rng(seed);

  embedding = nn::EmbeddingTable("embedding", c.vocab_size, c.embed_dim, kPadToken, rng);
  for (auto &v : embedding.table.value.row(kUnknownToken))
    v = 0.0;

  switch (c.question_encoder) {
  case QuestionEncoder::gru_forward:
  case QuestionEncoder::gru_backward:
    gru.emplace_back("gru0", c.embed_dim, c.hidden_dim, rng);
    break;
  case QuestionEncoder::gru_2layer:
    gru.emplace_back("gru0", c.embed_dim, c.hidden_dim, rng);
    gru.emplace_back("gru1", c.hidden_dim, c.hidden_dim, rng);
    break;
  case QuestionEncoder::bow_sum:
  case QuestionEncoder::bow_average:
    break;
  }

  attention = nn::Attention("attention", c.feature_dim, c.query_dim(), c.hidden_dim,
                            c.attention_heads, c.attention_norm, c.activation, rng);
  f_q = nn::NonLinearLayer("f_q", c.query_dim(), c.hidden_dim, c.activation, rng);
  f_v = nn::NonLinearLayer("f_v", c.attention_heads * c.feature_dim, c.hidden_dim,
                           c.activation, rng);

  if (c.output_head == OutputHead::sigmoid_decomposed) {
    f_o_text = nn::NonLinearLayer("f_o_text", c.hidden_dim, c.embed_dim, c.activation, rng);
    f_o_img = nn::NonLinearLayer("f_o_img", c.hidden_dim, c.feature_dim, c.activation, rng);
    w_text = Parameter("w_text", nn::glorot_uniform(c.num_answers, c.embed_dim, rng),
                       kTextClassifierLrScale);
    w_img = Parameter("w_img", nn::glorot_uniform(c.num_answers, c.feature_dim, rng),
                      kImageClassifierLrScale);
  } else {
    f_o = nn::NonLinearLayer("f_o", c.hidden_dim, c.hidden_dim, c.activation, rng);
    w_o = Parameter("w_o", nn::glorot_uniform(c.num_answers, c.hidden_dim, rng));
  }
}

std::vector<Parameter *> VqaModel::parameters() {
  std::vector<Parameter *> out;
  embedding.collect(out);
  for (auto &cell : gru)
    cell.collect(out);
  attention.collect(out);
  f_q.collect(out);
  f_v.collect(out);
  if (config_.output_head == OutputHead::sigmoid_decomposed) {
    f_o_text.collect(out);
    f_o_img.collect(out);
    out.push_back(&w_text);
    out.push_back(&w_img);
  } else {
    f_o.collect(out);
    out.push_back(&w_o);
  }
  return out;
}

std::vector<const Parameter *> VqaModel::parameters() const {
  auto mutable_params = const_cast<VqaModel *>(this)->parameters();
  return {mutable_params.begin(), mutable_params.end()};
}

Parameter *VqaModel::find_parameter(std::string_view name) {
  for (auto *p : parameters())
    if (p->name == name)
      return p;
  return nullptr;
}

ad::Var VqaModel::encode_question(ad::Graph &g, std::span<const int> token_ids) {
  const auto T = config_.max_question_len;
  if (token_ids.size() != T)
    throw ShapeError("encode_question: expected " + std::to_string(T) + " token ids, got " +
                     std::to_string(token_ids.size()));
  auto words = embedding.lookup(g, token_ids);
  switch (config_.question_encoder) {
  case QuestionEncoder::gru_forward:
    return gru[0].run(g, words).back();
  case QuestionEncoder::gru_backward:
    return gru[0].run(g, words, /*reverse=*/true).back();
  case QuestionEncoder::gru_2layer: {
    auto first = gru[0].run(g, words);
    return gru[1].run(g, ad::stack_rows(first)).back();
  }
  case QuestionEncoder::bow_sum:
    return ad::sum_rows(words);
  case QuestionEncoder::bow_average:
    return ad::scale(ad::sum_rows(words), 1.0 / static_cast<double>(T));
  }
  throw std::logic_error("unhandled question encoder");
}

VqaModel::ForwardOutput VqaModel::forward(ad::Graph &g, std::span<const int> token_ids,
                                          const Tensor &features) {
  if (features.rank() != 2 || features.cols() != config_.feature_dim)
    throw ShapeError("forward: features must be [K x " + std::to_string(config_.feature_dim) +
                     "], got " + to_string(features.shape()));
  if (features.rows() == 0)
    throw std::invalid_argument("forward: image has no regions (K = 0)");

  auto q = encode_question(g, token_ids);
  auto attended = attention(g, g.constant(features), q);
  auto h = ad::hadamard(f_q(g, q), f_v(g, attended.pooled));

  ForwardOutput out;
  out.attention = std::move(attended.weights);
  switch (config_.output_head) {
  case OutputHead::sigmoid_decomposed:
    out.logits = ad::add(ad::affine(f_o_text(g, h), g.param(w_text)),
                         ad::affine(f_o_img(g, h), g.param(w_img)));
    out.scores = ad::sigmoid(out.logits);
    break;
  case OutputHead::sigmoid_single:
    out.logits = ad::affine(f_o(g, h), g.param(w_o));
    out.scores = ad::sigmoid(out.logits);
    break;
  case OutputHead::softmax:
    out.logits = ad::affine(f_o(g, h), g.param(w_o));
    out.scores = ad::softmax(out.logits);
    break;
  }
  return out;
}

Prediction VqaModel::predict(std::span<const int> token_ids, const Tensor &features) {
  std::vector<Tensor> unused;
  return predict(token_ids, features, unused);
}

Prediction VqaModel::predict(std::span<const int> token_ids, const Tensor &features,
                             std::vector<Tensor> &attention_weights) {
  ad::Graph g;
  auto out = forward(g, token_ids, features);
  Prediction p;
  p.scores = out.scores.value();
  p.answer = argmax(p.scores.data());
  attention_weights.clear();
  for (const auto &a : out.attention)
    attention_weights.push_back(a.value());
  return p;
}

// Initialization from external embeddings ------------------------------------

namespace {

void copy_rows(Parameter &target, std::span<const std::string> answers,
               const std::map<std::string, Tensor> &source, const char *what) {
  const auto width = target.value.cols();
  for (std::size_t j = 0; j < answers.size(); ++j) {
    auto it = source.find(answers[j]);
    if (it == source.end())
      continue;
    if (it->second.size() != width || it->second.rank() != 1)
      throw ShapeError(std::string(what) + " embedding for answer '" + answers[j] +
                       "' has shape " + to_string(it->second.shape()) + ", expected [" +
                       std::to_string(width) + "]");
    std::copy(it->second.data().begin(), it->second.data().end(),
              target.value.row(j).begin());
  }
}

void permute_rows(Parameter &p, const std::vector<std::size_t> &perm) {
  const Tensor original = p.value;
  for (std::size_t j = 0; j < perm.size(); ++j) {
    auto src = original.row(perm[j]);
    std::copy(src.begin(), src.end(), p.value.row(j).begin());
  }
}

} // namespace

void init_output_classifier(VqaModel &model, std::span<const std::string> answers,
                            const std::map<std::string, Tensor> &text_embeddings,
                            const std::map<std::string, Tensor> &visual_embeddings,
                            ClassifierInit mode, std::uint64_t shuffle_seed) {
  const auto &c = model.config();
  if (c.output_head != OutputHead::sigmoid_decomposed)
    throw std::logic_error("init_output_classifier requires the sigmoid_decomposed head, "
                           "model uses " +
                           std::string(to_string(c.output_head)));
  if (answers.size() != c.num_answers)
    throw std::invalid_argument("init_output_classifier: " + std::to_string(answers.size()) +
                                " answers for a classifier with " +
                                std::to_string(c.num_answers) + " rows");
  copy_rows(model.w_text, answers, text_embeddings, "text");
  copy_rows(model.w_img, answers, visual_embeddings, "visual");
  if (mode == ClassifierInit::shuffle) {
    Rng rng(shuffle_seed);
    const auto perm = rng.permutation(c.num_answers);
    permute_rows(model.w_text, perm);
    permute_rows(model.w_img, perm);
  }
}

void init_word_embeddings(VqaModel &model, std::span<const std::string> words,
                          const std::map<std::string, Tensor> &pretrained) {
  auto &table = model.embedding.table.value;
  if (words.size() != table.rows())
    throw std::invalid_argument("init_word_embeddings: " + std::to_string(words.size()) +
                                " words for an embedding table with " +
                                std::to_string(table.rows()) + " rows");
  for (std::size_t r = 0; r < words.size(); ++r) {
    auto dst = table.row(r);
    std::fill(dst.begin(), dst.end(), 0.0);
    if (r == model.embedding.pad_row())
      continue;
    auto it = pretrained.find(words[r]);
    if (it == pretrained.end())
      continue;
    if (it->second.size() != dst.size())
      throw ShapeError("pretrained vector for '" + words[r] + "' has " +
                       std::to_string(it->second.size()) + " values, expected " +
                       std::to_string(dst.size()));
    std::copy(it->second.data().begin(), it->second.data().end(), dst.begin());
  }
}

// Checkpoints ----------------------------------------------------------------

namespace {
constexpr std::string_view kCheckpointMagic = "VQAC";
constexpr std::uint32_t kCheckpointVersion = 1;
} // namespace

std::string save_checkpoint(const VqaModel &model, const json &metadata) {
  io::ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.str(json{{"config", model.config().to_json()}, {"metadata", metadata}}.dump());
  const auto params = model.parameters();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto *p : params) {
    w.str(p->name);
    const auto &shape = p->value.shape();
    w.u32(static_cast<std::uint32_t>(shape.size()));
    for (auto extent : shape)
      w.u32(static_cast<std::uint32_t>(extent));
    for (double v : p->value.data())
      w.f64(v);
  }
  return w.take();
}

LoadedCheckpoint load_checkpoint(std::string_view bytes) {
  io::ByteReader r(bytes);
  r.expect_magic(kCheckpointMagic);
  const auto version_offset = r.offset();
  const auto version = r.u32("checkpoint version");
  if (version != kCheckpointVersion)
    throw io::FormatError("unsupported checkpoint version " + std::to_string(version),
                          version_offset);

  const auto header_offset = r.offset();
  json header;
  try {
    header = json::parse(r.str("checkpoint header"));
  } catch (const json::parse_error &e) {
    throw io::FormatError(std::string("checkpoint header is not valid JSON: ") + e.what(),
                          header_offset);
  }
  if (!header.is_object() || !header.contains("config"))
    throw io::FormatError("checkpoint header lacks a config", header_offset);
  ModelConfig config;
  try {
    config = ModelConfig::from_json(header.at("config"));
  } catch (const std::invalid_argument &e) {
    throw io::FormatError(std::string("checkpoint config: ") + e.what(), header_offset);
  }

  LoadedCheckpoint out{VqaModel(config, 0),
                       header.value("metadata", json::object())};
  auto expected = out.model.parameters();
  const auto count_offset = r.offset();
  const auto count = r.u32("parameter count");
  if (count != expected.size())
    throw io::FormatError("checkpoint holds " + std::to_string(count) +
                              " parameters, configuration expects " +
                              std::to_string(expected.size()),
                          count_offset);
  for (auto *p : expected) {
    const auto name_offset = r.offset();
    const auto name = r.str("parameter name");
    if (name != p->name)
      throw io::FormatError("expected parameter '" + p->name + "', found '" + name + "'",
                            name_offset);
    const auto rank = r.u32("parameter rank");
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i)
      shape.push_back(r.u32("parameter extent"));
    if (shape != p->value.shape())
      throw io::FormatError("parameter '" + name + "' has shape " + to_string(shape) +
                                ", expected " + to_string(p->value.shape()),
                            name_offset);
    r.require(8 * p->value.size(), ("values of " + name).c_str());
    for (auto &v : p->value.data())
      v = r.f64("parameter value");
  }
  if (!r.at_end())
    throw io::FormatError(std::to_string(r.remaining()) + " trailing bytes after parameters",
                          r.offset());
  return out;
}

} // namespace vqa::model
