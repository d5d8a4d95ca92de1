// SPDX-License-Identifier: Apache-2.0
#include "vqa/data.hpp"

#include <algorithm>
#include <cctype>
#include <deque>

#include "vqa/rng.hpp"

namespace vqa::data {

std::string_view to_string(AnswerType t) {
  switch (t) {
  case AnswerType::yes_no:
    return "yes/no";
  case AnswerType::number:
    return "number";
  case AnswerType::other:
    return "other";
  }
  return "?";
}

AnswerType parse_answer_type(std::string_view s) {
  for (auto t : {AnswerType::yes_no, AnswerType::number, AnswerType::other})
    if (s == to_string(t))
      return t;
  throw std::invalid_argument("unknown answer type '" + std::string(s) + "'");
}

std::string_view to_string(Split s) { return s == Split::train ? "train" : "val"; }

// Text -----------------------------------------------------------------------

namespace {

bool is_separator_punct(char c) {
  return std::string_view(",.?!'\"():;-").find(c) != std::string_view::npos;
}

bool is_alnum(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }
bool is_digit(char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; }

template <typename Key>
std::vector<Key> by_count_then_key(const std::map<Key, std::int64_t> &counts,
                                   std::int64_t strictly_above) {
  std::vector<std::pair<Key, std::int64_t>> items;
  for (const auto &[k, n] : counts)
    if (n > strictly_above)
      items.emplace_back(k, n);
  std::stable_sort(items.begin(), items.end(),
                   [](const auto &a, const auto &b) { return a.second > b.second; });
  std::vector<Key> out;
  out.reserve(items.size());
  for (auto &[k, _] : items)
    out.push_back(std::move(k));
  return out;
}

} // namespace

std::vector<std::string> tokenize(std::string_view question) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty())
      tokens.push_back(std::move(current));
    current.clear();
  };
  for (std::size_t i = 0; i < question.size(); ++i) {
    const char c = question[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
      continue;
    }
    if (is_separator_punct(c)) {
      const char prev = i > 0 ? question[i - 1] : ' ';
      const char next = i + 1 < question.size() ? question[i + 1] : ' ';
      const bool inside_word = c == '\'' && is_alnum(prev) && is_alnum(next);
      const bool inside_number = is_digit(prev) && is_digit(next);
      if (!inside_word && !inside_number) {
        flush();
        continue;
      }
    }
    current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  flush();
  return tokens;
}

QuestionVocab::QuestionVocab() : QuestionVocab(std::span<const std::string>{}) {}

QuestionVocab::QuestionVocab(std::span<const std::string> words) {
  words_.emplace_back(kPadWord);
  words_.emplace_back(kUnknownWord);
  words_.insert(words_.end(), words.begin(), words.end());
  for (std::size_t i = 0; i < words_.size(); ++i)
    if (!index_.emplace(words_[i], static_cast<int>(i)).second)
      throw std::invalid_argument("question vocabulary: duplicate word '" + words_[i] + "'");
}

QuestionVocab QuestionVocab::build(std::span<const RawQuestion> training) {
  std::map<std::string, std::int64_t> counts;
  for (const auto &q : training)
    for (auto &t : tokenize(q.question))
      ++counts[t];
  counts.erase(std::string(kPadWord));
  counts.erase(std::string(kUnknownWord));
  const auto words = by_count_then_key(counts, 0);
  return QuestionVocab(words);
}

int QuestionVocab::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? kUnknown : it->second;
}

std::vector<int> pad_truncate(std::span<const std::string> tokens, const QuestionVocab &vocab,
                              std::size_t length) {
  std::vector<int> ids(length, QuestionVocab::kPad);
  for (std::size_t i = 0; i < std::min(length, tokens.size()); ++i)
    ids[i] = vocab.id(tokens[i]);
  return ids;
}

// Answers --------------------------------------------------------------------

std::map<std::string, double> compute_soft_scores(std::span<const std::string> answers) {
  if (answers.size() != 10)
    throw std::invalid_argument("soft scores need exactly 10 annotator answers, got " +
                                std::to_string(answers.size()));
  std::map<std::string, int> counts;
  for (const auto &a : answers)
    ++counts[a];
  std::map<std::string, double> scores;
  for (const auto &[answer, m] : counts) {
    // Leaving out one of the m matching annotators leaves m - 1 matches
    // (m subsets); leaving out anyone else leaves m (10 - m subsets).
    // Accumulate in thirds so the final division is the only rounding step.
    const int thirds = m * std::min(m - 1, 3) + (10 - m) * std::min(m, 3);
    scores[answer] = thirds / 30.0;
  }
  return scores;
}

AnswerVocabulary::AnswerVocabulary(std::vector<std::string> answers, std::int64_t threshold)
    : answers_(std::move(answers)), threshold_(threshold) {
  for (std::size_t i = 0; i < answers_.size(); ++i)
    if (!index_.emplace(answers_[i], i).second)
      throw std::invalid_argument("answer vocabulary: duplicate answer '" + answers_[i] + "'");
}

std::optional<std::size_t> AnswerVocabulary::find(std::string_view answer) const {
  auto it = index_.find(std::string(answer));
  if (it == index_.end())
    return std::nullopt;
  return it->second;
}

AnswerVocabulary build_answer_vocab(std::span<const RawQuestion> training,
                                    std::int64_t threshold) {
  if (threshold < 0)
    throw std::invalid_argument("answer vocabulary threshold must be non-negative");
  std::map<std::string, std::int64_t> counts;
  for (const auto &q : training) {
    std::vector<std::string> distinct(q.answers.begin(), q.answers.end());
    if (q.answer)
      distinct.push_back(*q.answer);
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    for (auto &a : distinct)
      ++counts[a];
  }
  return AnswerVocabulary(by_count_then_key(counts, threshold), threshold);
}

Targets attach_targets(const std::map<std::string, double> &soft_scores,
                       const AnswerVocabulary &vocab) {
  Targets targets;
  for (const auto &[answer, score] : soft_scores)
    if (auto idx = vocab.find(answer); idx && score > 0.0)
      targets[*idx] = score;
  return targets;
}

QAInstance make_instance(const RawQuestion &raw, const QuestionVocab &questions,
                         const AnswerVocabulary &answers, Split split,
                         std::size_t max_question_len) {
  QAInstance inst;
  inst.question_id = raw.question_id;
  inst.image_id = raw.image_id;
  inst.token_ids = pad_truncate(tokenize(raw.question), questions, max_question_len);
  inst.pair_id = raw.pair_id;
  inst.answer_type = raw.answer_type;
  inst.split = split;
  std::map<std::string, double> scores;
  if (!raw.answers.empty())
    scores = compute_soft_scores(raw.answers);
  else if (raw.answer)
    scores[*raw.answer] = 1.0;
  inst.targets = attach_targets(scores, answers);
  return inst;
}

std::vector<QAInstance> merge_visual_genome(std::vector<QAInstance> vqa,
                                            std::span<const RawQuestion> visual_genome,
                                            const QuestionVocab &questions,
                                            const AnswerVocabulary &answers,
                                            std::size_t max_question_len) {
  for (const auto &raw : visual_genome) {
    if (!raw.answer || !answers.find(*raw.answer))
      continue;
    auto inst = make_instance(raw, questions, answers, Split::train, max_question_len);
    inst.targets = {{*answers.find(*raw.answer), 1.0}};
    inst.pair_id.reset();
    vqa.push_back(std::move(inst));
  }
  return vqa;
}

// Batching -------------------------------------------------------------------

std::vector<std::size_t> balanced_pair_shuffle(
    std::span<const std::optional<std::int64_t>> pair_ids, std::size_t batch_size,
    std::uint64_t seed) {
  // Units in order of first appearance: pair groups together, others alone.
  std::vector<std::vector<std::size_t>> units;
  std::map<std::int64_t, std::size_t> unit_of_pair;
  for (std::size_t i = 0; i < pair_ids.size(); ++i) {
    if (!pair_ids[i]) {
      units.push_back({i});
      continue;
    }
    auto [it, inserted] = unit_of_pair.emplace(*pair_ids[i], units.size());
    if (inserted)
      units.push_back({i});
    else
      units[it->second].push_back(i);
  }
  std::size_t largest = 1;
  for (const auto &u : units)
    largest = std::max(largest, u.size());
  if (largest > 1 && batch_size < 2)
    throw std::invalid_argument("balanced pair shuffle needs a batch size of at least 2, got " +
                                std::to_string(batch_size));
  if (batch_size == 0)
    throw std::invalid_argument("batch size must be positive");
  if (largest > batch_size)
    throw InfeasibleShuffle("a pair group of " + std::to_string(largest) +
                            " questions does not fit in a batch of " +
                            std::to_string(batch_size));

  Rng rng(seed);
  rng.shuffle(units);

  std::vector<std::size_t> order;
  std::vector<bool> single_at; // parallel to order
  std::vector<std::size_t> tail;
  std::deque<const std::vector<std::size_t> *> waiting;
  order.reserve(pair_ids.size());
  auto emit = [&](const std::vector<std::size_t> &u) {
    for (auto i : u) {
      order.push_back(i);
      single_at.push_back(u.size() == 1);
    }
  };

  std::size_t next = 0;
  while (next < units.size() || !waiting.empty()) {
    const std::size_t room = batch_size - order.size() % batch_size;
    auto fits = std::find_if(waiting.begin(), waiting.end(),
                             [&](const auto *u) { return u->size() <= room; });
    if (fits != waiting.end()) {
      emit(**fits);
      waiting.erase(fits);
      continue;
    }
    if (next < units.size()) {
      const auto &u = units[next++];
      if (u.size() <= room)
        emit(u);
      else
        waiting.push_back(&u);
      continue;
    }
    // Only groups too large for the space left in this batch remain. Move the
    // most recent singleton of the batch to the end of the epoch to make room.
    const std::size_t batch_start = order.size() - order.size() % batch_size;
    std::size_t p = order.size();
    while (p > batch_start && !single_at[p - 1])
      --p;
    if (p == batch_start)
      throw InfeasibleShuffle("cannot keep every pair inside one batch of " +
                              std::to_string(batch_size) + " (no singletons left to fill gaps)");
    tail.push_back(order[p - 1]);
    order.erase(order.begin() + static_cast<std::ptrdiff_t>(p - 1));
    single_at.erase(single_at.begin() + static_cast<std::ptrdiff_t>(p - 1));
  }
  order.insert(order.end(), tail.begin(), tail.end());
  return order;
}

bool pairs_co_batched(std::span<const std::optional<std::int64_t>> pair_ids,
                      std::span<const std::size_t> order, std::size_t batch_size) {
  std::map<std::int64_t, std::size_t> batch_of_pair;
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    const auto &pid = pair_ids[order[pos]];
    if (!pid)
      continue;
    auto [it, inserted] = batch_of_pair.emplace(*pid, pos / batch_size);
    if (!inserted && it->second != pos / batch_size)
      return false;
  }
  return true;
}

} // namespace vqa::data
