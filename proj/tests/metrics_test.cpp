// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "vqa/binary_io.hpp"
#include "vqa/metrics.hpp"

using namespace vqa;
using namespace vqa::metrics;

namespace {

data::QAInstance instance(std::int64_t qid, data::Targets targets,
                          std::optional<std::int64_t> pair = std::nullopt,
                          std::optional<data::AnswerType> type = std::nullopt) {
  data::QAInstance inst;
  inst.question_id = qid;
  inst.image_id = qid;
  inst.token_ids.assign(14, 0);
  inst.targets = std::move(targets);
  inst.pair_id = pair;
  inst.answer_type = type;
  return inst;
}

/*
 * Ten questions with hand-computed scores. Predicted answer and its target:
 *   q1 1.0  q2 0.6  q3 0.0 (absent)  q4 0.3  q5 1.0
 *   q6 0.9  q7 1.0  q8 1.0  q9 0.0  q10 0.6
 * Mean = 6.4 / 10 -> 64.
 * Pairs (1,2), (5,7), (6,8), (9,10): only (5,7) has both members at 1.0 -> 25.
 */
struct Fixture {
  std::vector<data::QAInstance> instances;
  Predictions predictions;

  Fixture() {
    const auto yn = data::AnswerType::yes_no;
    const auto num = data::AnswerType::number;
    const auto other = data::AnswerType::other;
    instances = {
        instance(1, {{0, 1.0}}, 1, yn),          instance(2, {{0, 0.6}, {1, 1.0}}, 1, yn),
        instance(3, {{2, 1.0}}, std::nullopt, num),
        instance(4, {{3, 0.3}, {2, 1.0}}, std::nullopt, num),
        instance(5, {{4, 1.0}}, 2, other),       instance(6, {{1, 0.9}}, 3, other),
        instance(7, {{2, 1.0}}, 2, other),       instance(8, {{3, 1.0}}, 3, yn),
        instance(9, {}, 4),                      instance(10, {{4, 0.6}, {0, 0.3}}, 4, num),
    };
    predictions = {{1, 0}, {2, 0}, {3, 4}, {4, 3}, {5, 4},
                   {6, 1}, {7, 2}, {8, 3}, {9, 0}, {10, 4}};
  }
};

} // namespace

TEST(VqaAccuracy, AllCorrectIsHundred) {
  GroundTruth gt = {{1, {{0, 1.0}}}, {2, {{3, 1.0}, {1, 0.3}}}};
  EXPECT_DOUBLE_EQ(vqa_accuracy({{1, 0}, {2, 3}}, gt), 100.0);
}

TEST(VqaAccuracy, MeanOfTargetScores) {
  GroundTruth gt = {{1, {{0, 1.0}}}, {2, {{1, 0.6}}}};
  EXPECT_NEAR(vqa_accuracy({{1, 0}, {2, 1}}, gt), 80.0, 1e-12);
}

TEST(VqaAccuracy, AbsentAnswerScoresZero) {
  GroundTruth gt = {{1, {{0, 1.0}}}};
  EXPECT_EQ(vqa_accuracy({{1, 5}}, gt), 0.0);
}

TEST(VqaAccuracy, MissingGroundTruthThrows) {
  GroundTruth gt = {{1, {{0, 1.0}}}};
  EXPECT_THROW(vqa_accuracy({{2, 0}}, gt), std::out_of_range);
}

TEST(VqaAccuracy, TenQuestionFixture) {
  Fixture f;
  const auto gt = ground_truth(f.instances);
  EXPECT_NEAR(vqa_accuracy(f.predictions, gt), 64.0, 1e-9);
  const auto pairs = balanced_pairs(f.instances);
  ASSERT_EQ(pairs.size(), 4u);
  const auto acc = balanced_pair_accuracy(f.predictions, gt, pairs);
  ASSERT_TRUE(acc.has_value());
  EXPECT_NEAR(*acc, 25.0, 1e-9);
}

TEST(VqaAccuracy, OrderInvariant) {
  Fixture f;
  const auto gt = ground_truth(f.instances);
  std::vector<std::pair<std::int64_t, std::size_t>> items(f.predictions.begin(),
                                                          f.predictions.end());
  std::mt19937 gen(3);
  for (int trial = 0; trial < 5; ++trial) {
    std::shuffle(items.begin(), items.end(), gen);
    double total = 0.0;
    for (const auto &[q, a] : items) {
      const auto &t = gt.at(q);
      total += t.contains(a) ? t.at(a) : 0.0;
    }
    EXPECT_NEAR(100.0 * total / 10.0, vqa_accuracy(f.predictions, gt), 1e-9);
  }
}

TEST(PairAccuracy, BothExactlyOneCounts) {
  GroundTruth gt = {{1, {{0, 1.0}}}, {2, {{1, 1.0}}}};
  std::vector<QuestionPair> pairs = {{1, 2}};
  EXPECT_EQ(balanced_pair_accuracy({{1, 0}, {2, 1}}, gt, pairs), 100.0);
}

TEST(PairAccuracy, NinetyPercentMemberFails) {
  GroundTruth gt = {{1, {{0, 1.0}}}, {2, {{1, 0.9}}}};
  std::vector<QuestionPair> pairs = {{1, 2}};
  EXPECT_EQ(balanced_pair_accuracy({{1, 0}, {2, 1}}, gt, pairs), 0.0);
}

TEST(PairAccuracy, NoPairsIsUndefined) {
  GroundTruth gt = {{1, {{0, 1.0}}}};
  EXPECT_FALSE(balanced_pair_accuracy({{1, 0}}, gt, {}).has_value());
}

TEST(PairAccuracy, MissingMemberThrows) {
  GroundTruth gt = {{1, {{0, 1.0}}}, {2, {{1, 1.0}}}};
  std::vector<QuestionPair> pairs = {{1, 2}};
  EXPECT_THROW(balanced_pair_accuracy({{1, 0}}, gt, pairs), std::out_of_range);
}

TEST(PairAccuracy, BoundedByPairedQuestionAccuracy) {
  std::mt19937_64 gen(11);
  std::uniform_int_distribution<int> pick(0, 3);
  const double levels[] = {0.0, 0.3, 0.6, 0.9, 1.0};
  for (int trial = 0; trial < 50; ++trial) {
    GroundTruth gt;
    Predictions preds;
    std::vector<QuestionPair> pairs;
    for (std::int64_t p = 0; p < 20; ++p) {
      for (std::int64_t m = 0; m < 2; ++m) {
        const auto q = 2 * p + m;
        gt[q] = {{0, levels[std::uniform_int_distribution<int>(0, 4)(gen)]},
                 {1, levels[std::uniform_int_distribution<int>(0, 4)(gen)]}};
        preds[q] = static_cast<std::size_t>(pick(gen));
      }
      pairs.emplace_back(2 * p, 2 * p + 1);
    }
    EXPECT_LE(*balanced_pair_accuracy(preds, gt, pairs), vqa_accuracy(preds, gt) + 1e-9);
  }
}

TEST(AnswerRecall, ThreeOfFour) {
  GroundTruth gt = {{1, {{2, 1.0}}}, {2, {{2, 1.0}}}, {3, {{2, 1.0}}}, {4, {{2, 1.0}, {0, 0.3}}},
                    {5, {{0, 0.6}}}};
  Predictions preds = {{1, 2}, {2, 2}, {3, 2}, {4, 0}, {5, 0}};
  const auto report = answer_recall(preds, gt, 3);
  ASSERT_EQ(report.entries.size(), 1u);
  EXPECT_EQ(report.entries[0].answer, 2u);
  EXPECT_EQ(report.entries[0].support, 4u);
  EXPECT_DOUBLE_EQ(report.entries[0].recall, 0.75);
}

TEST(AnswerRecall, UnsupportedAnswersOmitted) {
  GroundTruth gt = {{1, {{0, 0.9}}}};
  EXPECT_TRUE(answer_recall({{1, 0}}, gt, 2).entries.empty());
}

TEST(AnswerRecall, OracleGivesFullRecall) {
  GroundTruth gt = {{1, {{0, 1.0}}}, {2, {{1, 1.0}}}, {3, {{1, 1.0}}}};
  const auto report = answer_recall({{1, 0}, {2, 1}, {3, 1}}, gt, 2);
  ASSERT_EQ(report.entries.size(), 2u);
  for (const auto &e : report.entries)
    EXPECT_EQ(e.recall, 1.0);
}

TEST(AnswerRecall, JsonNamesAnswers) {
  GroundTruth gt = {{1, {{1, 1.0}}}};
  data::AnswerVocabulary vocab({"yes", "no"}, 8);
  const auto j = answer_recall({{1, 1}}, gt, 2).to_json(vocab);
  ASSERT_EQ(j.size(), 1u);
  EXPECT_EQ(j[0]["answer"], "no");
  EXPECT_EQ(j[0]["support"], 1);
}

TEST(Ensemble, SumsThenArgmax) {
  std::vector<Tensor> scores = {Tensor({2}, {0.6, 0.4}), Tensor({2}, {0.1, 0.9})};
  const auto p = ensemble_predict(scores);
  EXPECT_EQ(p.answer, 1u);
  EXPECT_NEAR(p.scores[0], 0.7, 1e-15);
  EXPECT_NEAR(p.scores[1], 1.3, 1e-15);
}

TEST(Ensemble, IdenticalCopiesKeepAnswer) {
  std::mt19937_64 gen(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor s({7});
    for (auto &v : s.data())
      v = u(gen);
    for (std::size_t copies : {1u, 2u, 5u}) {
      std::vector<Tensor> replicas(copies, s);
      EXPECT_EQ(ensemble_predict(replicas).answer, model::argmax(s.data()));
    }
  }
}

TEST(Ensemble, TiesGoToLowestIndex) {
  std::vector<Tensor> scores = {Tensor({3}, {0.2, 0.5, 0.5})};
  EXPECT_EQ(ensemble_predict(scores).answer, 1u);
}

TEST(Ensemble, EmptyAndMismatchedRejected) {
  std::vector<Tensor> none;
  EXPECT_THROW(ensemble_predict(none), std::invalid_argument);
  std::vector<Tensor> mixed = {Tensor({2}), Tensor({3})};
  EXPECT_THROW(ensemble_predict(mixed), ShapeError);
}

TEST(Categorize, PartitionCoversAllQuestions) {
  Fixture f;
  const auto parts = categorize(f.instances);
  std::size_t total = 0;
  for (const auto &[_, qids] : parts)
    total += qids.size();
  EXPECT_EQ(total, f.instances.size());
  EXPECT_EQ(parts.at(data::AnswerType::yes_no).size(), 3u);
  EXPECT_EQ(parts.at(data::AnswerType::number).size(), 3u);
  EXPECT_EQ(parts.at(data::AnswerType::other).size(), 4u); // includes the unlabeled one
}

TEST(Categorize, UnlabeledGoesToOther) {
  std::vector<data::QAInstance> xs = {instance(1, {}), instance(2, {})};
  const auto parts = categorize(xs);
  ASSERT_EQ(parts.size(), 1u);
  EXPECT_EQ(parts.at(data::AnswerType::other).size(), 2u);
}

TEST(Evaluate, OverallIsWeightedMeanOfCategories) {
  Fixture f;
  const auto report = evaluate(f.predictions, f.instances);
  EXPECT_EQ(report.question_count, 10u);
  double weighted = 0.0;
  for (const auto &[type, score] : report.by_type)
    weighted += score * static_cast<double>(report.type_counts.at(type)) / 10.0;
  EXPECT_NEAR(report.overall, weighted, 1e-9);
  EXPECT_NEAR(report.overall, 64.0, 1e-9);
  EXPECT_NEAR(report.by_type.at(data::AnswerType::yes_no), 100.0 * 2.6 / 3.0, 1e-9);
  EXPECT_NEAR(report.by_type.at(data::AnswerType::number), 100.0 * 0.9 / 3.0, 1e-9);
  EXPECT_NEAR(report.by_type.at(data::AnswerType::other), 100.0 * 2.9 / 4.0, 1e-9);
}

TEST(Evaluate, JsonFields) {
  Fixture f;
  const auto j = evaluate(f.predictions, f.instances).to_json();
  EXPECT_NEAR(j.at("overall").get<double>(), 64.0, 1e-9);
  EXPECT_NEAR(j.at("pair_accuracy").get<double>(), 25.0, 1e-9);
  EXPECT_EQ(j.at("question_count"), 10);
  EXPECT_EQ(j.at("yes_no_count"), 3);
  EXPECT_TRUE(j.contains("number"));
}

TEST(Evaluate, NoPairsOmitsField) {
  std::vector<data::QAInstance> xs = {instance(1, {{0, 1.0}})};
  const auto j = evaluate({{1, 0}}, xs).to_json();
  EXPECT_FALSE(j.contains("pair_accuracy"));
  EXPECT_EQ(j.at("overall"), 100.0);
}

TEST(Evaluate, MissingPredictionThrows) {
  Fixture f;
  f.predictions.erase(3);
  EXPECT_THROW(evaluate(f.predictions, f.instances), std::out_of_range);
}

TEST(ScoreFile, RoundTripAtFloatPrecision) {
  ScoreTable table = {{7, Tensor({3}, {0.1, 0.25, 0.9})}, {42, Tensor({3}, {1.0 / 3.0, 0.0, 1.0})}};
  const auto bytes = serialize_scores(table);
  EXPECT_EQ(bytes.substr(0, 4), "VQAS");
  EXPECT_EQ(bytes.size(), 8u + 2 * (8 + 12));
  const auto back = parse_scores(bytes);
  EXPECT_EQ(back, round_to_stored_precision(table));
  EXPECT_EQ(serialize_scores(back), bytes);
}

TEST(ScoreFile, EmptyTable) {
  const auto bytes = serialize_scores({});
  EXPECT_EQ(bytes.size(), 8u);
  EXPECT_TRUE(parse_scores(bytes).empty());
}

TEST(ScoreFile, Errors) {
  ScoreTable table = {{7, Tensor({3}, {0.1, 0.2, 0.3})}};
  auto bytes = serialize_scores(table);
  EXPECT_THROW(parse_scores(bytes.substr(0, bytes.size() - 2)), io::FormatError);
  EXPECT_THROW(parse_scores("VQAX" + bytes.substr(4)), io::FormatError);
  EXPECT_THROW(parse_scores(bytes + bytes.substr(8)), io::FormatError); // duplicate id
  ScoreTable ragged = {{1, Tensor({2})}, {2, Tensor({3})}};
  EXPECT_THROW(serialize_scores(ragged), ShapeError);
}

TEST(Predictions, JsonLines) {
  data::AnswerVocabulary vocab({"yes", "no", "2"}, 8);
  EXPECT_EQ(serialize_predictions({{5, 2}, {3, 0}}, vocab),
            "{\"answer\":\"yes\",\"question_id\":3}\n{\"answer\":\"2\",\"question_id\":5}\n");
}
