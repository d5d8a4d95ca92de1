// SPDX-License-Identifier: Apache-2.0
#include "vqa/metrics.hpp"

#include <stdexcept>

#include "vqa/binary_io.hpp"

namespace vqa::metrics {

namespace {

double target_score(const data::Targets &targets, std::size_t answer) {
  auto it = targets.find(answer);
  return it == targets.end() ? 0.0 : it->second;
}

const data::Targets &lookup(const GroundTruth &gt, std::int64_t qid) {
  auto it = gt.find(qid);
  if (it == gt.end())
    throw std::out_of_range("no ground truth for question " + std::to_string(qid));
  return it->second;
}

std::size_t lookup(const Predictions &p, std::int64_t qid) {
  auto it = p.find(qid);
  if (it == p.end())
    throw std::out_of_range("no prediction for question " + std::to_string(qid));
  return it->second;
}

} // namespace

GroundTruth ground_truth(std::span<const data::QAInstance> instances) {
  GroundTruth gt;
  for (const auto &inst : instances)
    gt[inst.question_id] = inst.targets;
  return gt;
}

std::vector<QuestionPair> balanced_pairs(std::span<const data::QAInstance> instances) {
  std::map<std::int64_t, std::vector<std::int64_t>> groups;
  for (const auto &inst : instances)
    if (inst.pair_id)
      groups[*inst.pair_id].push_back(inst.question_id);
  std::vector<QuestionPair> pairs;
  for (const auto &[_, members] : groups)
    if (members.size() == 2)
      pairs.emplace_back(members[0], members[1]);
  return pairs;
}

double vqa_accuracy(const Predictions &predictions, const GroundTruth &gt) {
  if (predictions.empty())
    return 0.0;
  double total = 0.0;
  for (const auto &[qid, answer] : predictions)
    total += target_score(lookup(gt, qid), answer);
  return 100.0 * total / static_cast<double>(predictions.size());
}

std::optional<double> balanced_pair_accuracy(const Predictions &predictions,
                                             const GroundTruth &gt,
                                             std::span<const QuestionPair> pairs) {
  if (pairs.empty())
    return std::nullopt;
  std::size_t correct = 0;
  for (const auto &[a, b] : pairs) {
    const bool a_ok = target_score(lookup(gt, a), lookup(predictions, a)) == 1.0;
    const bool b_ok = target_score(lookup(gt, b), lookup(predictions, b)) == 1.0;
    correct += a_ok && b_ok;
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(pairs.size());
}

nlohmann::json AnswerRecallReport::to_json(const data::AnswerVocabulary &vocab) const {
  auto arr = nlohmann::json::array();
  for (const auto &e : entries)
    arr.push_back({{"answer", vocab[e.answer]},
                   {"index", e.answer},
                   {"recall", e.recall},
                   {"support", e.support}});
  return arr;
}

AnswerRecallReport answer_recall(const Predictions &predictions, const GroundTruth &gt,
                                 std::size_t num_answers) {
  std::vector<std::size_t> support(num_answers, 0), hits(num_answers, 0);
  for (const auto &[qid, answer] : predictions)
    for (const auto &[j, score] : lookup(gt, qid)) {
      if (score != 1.0 || j >= num_answers)
        continue;
      ++support[j];
      hits[j] += answer == j;
    }
  AnswerRecallReport report;
  for (std::size_t j = 0; j < num_answers; ++j)
    if (support[j] > 0)
      report.entries.push_back(
          {j, static_cast<double>(hits[j]) / static_cast<double>(support[j]), support[j]});
  return report;
}

model::Prediction ensemble_predict(std::span<const Tensor> score_vectors) {
  if (score_vectors.empty())
    throw std::invalid_argument("ensemble of zero score vectors");
  Tensor total = score_vectors.front();
  for (std::size_t e = 1; e < score_vectors.size(); ++e) {
    require_same_shape(total, score_vectors[e], "ensemble_predict");
    for (std::size_t i = 0; i < total.size(); ++i)
      total[i] += score_vectors[e][i];
  }
  model::Prediction p;
  p.answer = model::argmax(total.data());
  p.scores = std::move(total);
  return p;
}

std::map<data::AnswerType, std::vector<std::int64_t>>
categorize(std::span<const data::QAInstance> instances) {
  std::map<data::AnswerType, std::vector<std::int64_t>> out;
  for (const auto &inst : instances)
    out[inst.answer_type.value_or(data::AnswerType::other)].push_back(inst.question_id);
  return out;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j = {{"overall", overall}, {"question_count", question_count}};
  for (auto t : {data::AnswerType::yes_no, data::AnswerType::number, data::AnswerType::other}) {
    const std::string key = t == data::AnswerType::yes_no ? "yes_no" : std::string(to_string(t));
    if (auto it = by_type.find(t); it != by_type.end())
      j[key] = it->second;
    j[key + "_count"] = type_counts.contains(t) ? type_counts.at(t) : 0;
  }
  if (pair_accuracy)
    j["pair_accuracy"] = *pair_accuracy;
  return j;
}

EvalReport evaluate(const Predictions &predictions,
                    std::span<const data::QAInstance> instances) {
  const auto gt = ground_truth(instances);
  EvalReport report;
  report.question_count = instances.size();
  Predictions all;
  for (const auto &inst : instances)
    all[inst.question_id] = lookup(predictions, inst.question_id);
  report.overall = vqa_accuracy(all, gt);
  for (const auto &[type, qids] : categorize(instances)) {
    Predictions subset;
    for (auto q : qids)
      subset[q] = all.at(q);
    report.by_type[type] = vqa_accuracy(subset, gt);
    report.type_counts[type] = subset.size();
  }
  const auto pairs = balanced_pairs(instances);
  report.pair_accuracy = balanced_pair_accuracy(all, gt, pairs);
  return report;
}

ScoreTable score_all(model::VqaModel &model, std::span<const data::QAInstance> instances,
                     const data::FeatureStore &features) {
  ScoreTable out;
  for (const auto &inst : instances) {
    auto it = features.find(inst.image_id);
    if (it == features.end())
      throw std::out_of_range("no features for image " + std::to_string(inst.image_id) +
                              " (question " + std::to_string(inst.question_id) + ")");
    out[inst.question_id] = model.predict(inst.token_ids, it->second).scores;
  }
  return out;
}

Predictions predict_all(const ScoreTable &scores) {
  Predictions out;
  for (const auto &[qid, s] : scores)
    out[qid] = model::argmax(s.data());
  return out;
}

namespace {
constexpr std::string_view kScoreMagic = "VQAS";
}

std::string serialize_scores(const ScoreTable &scores) {
  io::ByteWriter w;
  w.bytes(kScoreMagic);
  const std::size_t n = scores.empty() ? 0 : scores.begin()->second.size();
  w.u32(static_cast<std::uint32_t>(n));
  for (const auto &[qid, s] : scores) {
    if (s.rank() != 1 || s.size() != n)
      throw ShapeError("score vector for question " + std::to_string(qid) + " has shape " +
                       to_string(s.shape()) + ", expected [" + std::to_string(n) + "]");
    w.u64(static_cast<std::uint64_t>(qid));
    for (double v : s.data())
      w.f32(static_cast<float>(v));
  }
  return w.take();
}

ScoreTable parse_scores(std::string_view bytes) {
  io::ByteReader r(bytes);
  r.expect_magic(kScoreMagic);
  const auto n = r.u32("answer count");
  ScoreTable out;
  while (!r.at_end()) {
    const auto record_at = r.offset();
    if (n == 0)
      throw io::FormatError("score records in a file with zero answers", record_at);
    const auto qid = static_cast<std::int64_t>(r.u64("question id"));
    r.require(std::uint64_t{4} * n, "scores");
    Tensor s({n});
    for (auto &v : s.data())
      v = static_cast<double>(r.f32("score"));
    if (!out.emplace(qid, std::move(s)).second)
      throw io::FormatError("duplicate question id " + std::to_string(qid), record_at);
  }
  return out;
}

ScoreTable round_to_stored_precision(const ScoreTable &scores) {
  ScoreTable out = scores;
  for (auto &[_, s] : out)
    for (auto &v : s.data())
      v = static_cast<double>(static_cast<float>(v));
  return out;
}

std::string serialize_predictions(const Predictions &predictions,
                                  const data::AnswerVocabulary &vocab) {
  std::string out;
  for (const auto &[qid, answer] : predictions) {
    out += nlohmann::json{{"question_id", qid}, {"answer", vocab[answer]}}.dump();
    out += '\n';
  }
  return out;
}

} // namespace vqa::metrics
