// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "vqa/data.hpp"
#include "vqa/model.hpp"

namespace vqa::metrics {

/// question_id -> predicted answer index.
using Predictions = std::map<std::int64_t, std::size_t>;
/// question_id -> soft targets.
using GroundTruth = std::map<std::int64_t, data::Targets>;
/// question_id -> score vector [N].
using ScoreTable = std::map<std::int64_t, Tensor>;
using QuestionPair = std::pair<std::int64_t, std::int64_t>;

GroundTruth ground_truth(std::span<const data::QAInstance> instances);

/// Pairs of questions sharing a pair id (groups of any other size are ignored).
std::vector<QuestionPair> balanced_pairs(std::span<const data::QAInstance> instances);

/**
 * 100 x the mean ground-truth score of the predicted answers. Answers missing
 * from a question's targets score 0. Throws std::out_of_range when a predicted
 * question has no ground truth; an empty prediction set scores 0.
 */
double vqa_accuracy(const Predictions &predictions, const GroundTruth &gt);

/// 100 x the fraction of pairs whose two predicted answers both score exactly
/// 1.0; nullopt when there are no pairs.
std::optional<double> balanced_pair_accuracy(const Predictions &predictions,
                                             const GroundTruth &gt,
                                             std::span<const QuestionPair> pairs);

struct AnswerRecall {
  std::size_t answer = 0;
  double recall = 0.0;
  std::size_t support = 0; ///< questions where this answer scores 1.0
};

/// Answers with zero support are omitted.
struct AnswerRecallReport {
  std::vector<AnswerRecall> entries;
  nlohmann::json to_json(const data::AnswerVocabulary &vocab) const;
};

/// For every answer j: the share of questions where j scores 1.0 in the
/// ground truth for which j is also the emitted answer.
AnswerRecallReport answer_recall(const Predictions &predictions, const GroundTruth &gt,
                                 std::size_t num_answers);

/// Element-wise sum of the score vectors, then argmax (lowest index on ties).
model::Prediction ensemble_predict(std::span<const Tensor> score_vectors);

/// Question ids by answer type; unlabeled questions count as "other".
std::map<data::AnswerType, std::vector<std::int64_t>>
categorize(std::span<const data::QAInstance> instances);

struct EvalReport {
  double overall = 0.0;
  std::map<data::AnswerType, double> by_type; ///< only non-empty categories
  std::map<data::AnswerType, std::size_t> type_counts;
  std::optional<double> pair_accuracy;
  std::size_t question_count = 0;

  nlohmann::json to_json() const;
};

EvalReport evaluate(const Predictions &predictions,
                    std::span<const data::QAInstance> instances);

/// Runs the model on every instance. Throws std::out_of_range naming the
/// image when its features are missing.
ScoreTable score_all(model::VqaModel &model, std::span<const data::QAInstance> instances,
                     const data::FeatureStore &features);
Predictions predict_all(const ScoreTable &scores);

/// "VQAS", u32 N, then per question u64 id and N float32 scores.
std::string serialize_scores(const ScoreTable &scores);
ScoreTable parse_scores(std::string_view bytes);
/// Rounds every score to single precision, matching what a score file stores.
ScoreTable round_to_stored_precision(const ScoreTable &scores);

/// JSON Lines {"question_id": ..., "answer": ...} in question id order.
std::string serialize_predictions(const Predictions &predictions,
                                  const data::AnswerVocabulary &vocab);

} // namespace vqa::metrics
