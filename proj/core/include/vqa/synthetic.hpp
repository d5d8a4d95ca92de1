// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vqa/data.hpp"
#include "vqa/model.hpp"

namespace vqa::synth {

/**
 * A desk-scale attention task. Every image holds `regions_per_image` regions
 * of distinct object types; each region has a color and a material encoded as
 * one-hot blocks of its feature vector. A question names an object type and
 * one attribute ("... what color is the cup"); the answer is that attribute
 * of the region with the named type, so the model has to find that region.
 * Questions are fourteen words long with the object and attribute words at
 * the end. A `material_fraction` of the single-answer questions ask for the
 * material instead of the color.
 *
 * Feature layout: [type one-hot (value 2) | color one-hot | mixed flag |
 * dark flag | material one-hot | tone one-hot | spare dims]. Every value
 * gets Gaussian noise of `feature_noise`.
 *
 * With `tones` > 0 each region also has a tone and color answers name both
 * factors ("pale-red"), giving 4 x tones color answers. The word vector of
 * such an answer is the sum of a hue vector and a tone vector, and its
 * visual prototype has both slots set.
 *
 * A `multi_answer_fraction` of questions (all color questions) carry two
 * answers. Two in five of them are "dark" regions: eight annotators give the
 * color (1.0) and two say "dark" (0.6), both readable from the features. The
 * rest are "mixed" regions: eight annotators agree on a color that the
 * features do not reveal (1.0) and two say "colorful" (0.6), which they do.
 */
struct SynthSpec {
  std::size_t num_train = 200;
  std::size_t num_val = 50;
  std::size_t regions_per_image = 6;
  std::size_t region_types = 8;
  std::size_t feature_dim = 24;
  std::size_t embed_dim = 16;
  double pair_fraction = 0.5;
  double multi_answer_fraction = 0.0;
  double material_fraction = 0.0;
  double feature_noise = 0.05;
  std::size_t tones = 0; ///< 0 to 4
  std::uint64_t seed = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static SynthSpec from_json(const nlohmann::json &j);
};

struct SynthDataset {
  std::vector<data::RawQuestion> train;
  std::vector<data::RawQuestion> val;
  data::FeatureStore features; ///< as generated, not normalized
  /// Every answer the generator can emit, in a fixed order.
  std::vector<std::string> answers;
  /// Vectors for question words and answers. Answers of the same kind
  /// (colors, materials, modifiers) sit near a shared center, and the
  /// attribute words "color" and "made" sit near their answers' center.
  std::map<std::string, Tensor> word_embeddings;
  /// Prototype feature vector of each answer (the one-hot block it names).
  std::map<std::string, Tensor> answer_visual_embeddings;
  /// Index of the region each question asks about.
  std::map<std::int64_t, std::size_t> target_region;
};

SynthDataset generate(const SynthSpec &spec);

/// Object type names; the first `region_types` are used.
const std::vector<std::string> &type_names();

/**
 * Answers each question from the generator's own mapping by decoding the
 * region features directly, with no learning involved.
 */
std::string oracle_answer(const data::RawQuestion &q, const Tensor &image_features,
                          const SynthSpec &spec);

/// A generated dataset run through the regular data pipeline.
struct PreparedTask {
  data::QuestionVocab questions;
  data::AnswerVocabulary answers;
  std::vector<data::QAInstance> train;
  std::vector<data::QAInstance> val;
  data::FeatureStore features; ///< L2-normalized rows
  std::size_t embed_dim = 0;    ///< width of the generated word embeddings

  /// Model configuration sized to this task with the given hidden width.
  model::ModelConfig model_config(std::size_t hidden_dim) const;
};

/// Builds vocabularies from the training questions (answers kept when given
/// more than `threshold` times), makes instances and normalizes features.
PreparedTask prepare(const SynthDataset &ds, std::int64_t threshold = 0);

/**
 * Writes questions_train.jsonl, questions_val.jsonl, features.bin,
 * word_embeddings.txt, answers.txt, answer_visual.bin (keyed by the order of
 * answers.txt), target_regions.jsonl and synth_spec.json into `dir`.
 */
void write_dataset(const std::filesystem::path &dir, const SynthDataset &ds,
                   const SynthSpec &spec);

} // namespace vqa::synth
