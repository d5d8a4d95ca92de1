// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vqa/tensor.hpp"

namespace vqa::data {

enum class AnswerType { yes_no, number, other };
enum class Split { train, val };

std::string_view to_string(AnswerType t);
AnswerType parse_answer_type(std::string_view s);
std::string_view to_string(Split s);

/// Sparse soft targets: answer vocabulary index -> score in [0, 1].
using Targets = std::map<std::size_t, double>;

/// One question as stored in a questions file, before vocabulary mapping.
struct RawQuestion {
  std::int64_t question_id = 0;
  std::int64_t image_id = 0;
  std::string question;
  std::vector<std::string> answers; ///< ten annotator answers, or empty
  std::optional<std::string> answer; ///< single answer (Visual Genome style)
  std::optional<AnswerType> answer_type;
  std::optional<std::int64_t> pair_id;

  friend bool operator==(const RawQuestion &, const RawQuestion &) = default;
};

struct QAInstance {
  std::int64_t question_id = 0;
  std::int64_t image_id = 0;
  std::vector<int> token_ids;
  Targets targets;
  std::optional<std::int64_t> pair_id;
  std::optional<AnswerType> answer_type;
  Split split = Split::train;
};

// Text -----------------------------------------------------------------------

/**
 * Lower-cases and splits on whitespace and the characters , . ? ! ' " ( ) : ; -
 * An apostrophe between two letters or digits stays inside its word, and any
 * of those characters between two digits stays inside its number, so "2:15pm"
 * and "10,000" remain single tokens.
 */
std::vector<std::string> tokenize(std::string_view question);

/// Question words. Row 0 is padding and row 1 the shared unknown-word row.
class QuestionVocab {
public:
  static constexpr int kPad = 0;
  static constexpr int kUnknown = 1;
  static constexpr std::string_view kPadWord = "<pad>";
  static constexpr std::string_view kUnknownWord = "<unk>";

  QuestionVocab();
  /// Words ordered as given after the two reserved entries; duplicates rejected.
  explicit QuestionVocab(std::span<const std::string> words);

  /// Every token of the training questions, by descending count then
  /// lexicographically.
  static QuestionVocab build(std::span<const RawQuestion> training);

  int id(std::string_view word) const;
  std::size_t size() const noexcept { return words_.size(); }
  /// All entries including the reserved ones; words()[i] names embedding row i.
  const std::vector<std::string> &words() const noexcept { return words_; }

private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

/// The first `length` tokens mapped to ids, end-padded with the pad id.
std::vector<int> pad_truncate(std::span<const std::string> tokens, const QuestionVocab &vocab,
                              std::size_t length = 14);

// Answers --------------------------------------------------------------------

/**
 * Soft accuracy of every distinct answer among ten annotator answers: the
 * mean over the ten leave-one-out subsets of min(count_in_subset / 3, 1).
 * Values are 0, 0.3, 0.6, 0.9 and 1.0 for one through four or more matches.
 */
std::map<std::string, double> compute_soft_scores(std::span<const std::string> answers);

class AnswerVocabulary {
public:
  AnswerVocabulary() = default;
  /// Duplicates rejected.
  AnswerVocabulary(std::vector<std::string> answers, std::int64_t threshold);

  std::optional<std::size_t> find(std::string_view answer) const;
  std::size_t size() const noexcept { return answers_.size(); }
  const std::vector<std::string> &answers() const noexcept { return answers_; }
  const std::string &operator[](std::size_t i) const { return answers_.at(i); }
  std::int64_t threshold() const noexcept { return threshold_; }

private:
  std::vector<std::string> answers_;
  std::unordered_map<std::string, std::size_t> index_;
  std::int64_t threshold_ = 0;
};

/**
 * Answers given in strictly more than `threshold` training questions. A
 * question contributes one occurrence for each distinct annotator answer
 * (or its single answer). Ordered by descending count, then lexicographically.
 */
AnswerVocabulary build_answer_vocab(std::span<const RawQuestion> training,
                                    std::int64_t threshold);

/// Soft scores restricted to the vocabulary; an empty result is kept as is.
Targets attach_targets(const std::map<std::string, double> &soft_scores,
                       const AnswerVocabulary &vocab);

/// Tokenizes, computes soft scores (or 1.0 for a single answer) and maps both
/// through the vocabularies.
QAInstance make_instance(const RawQuestion &raw, const QuestionVocab &questions,
                         const AnswerVocabulary &answers, Split split,
                         std::size_t max_question_len = 14);

/// Appends Visual Genome questions whose single answer is in the vocabulary,
/// each with target 1.0 and no pair id.
std::vector<QAInstance> merge_visual_genome(std::vector<QAInstance> vqa,
                                            std::span<const RawQuestion> visual_genome,
                                            const QuestionVocab &questions,
                                            const AnswerVocabulary &answers,
                                            std::size_t max_question_len = 14);

// Batching -------------------------------------------------------------------

/// The pair-aware order cannot be built (odd batch size with no free singles,
/// or a pair group larger than a batch).
class InfeasibleShuffle : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/**
 * Epoch ordering that keeps all members of a pair group inside one batch of
 * `batch_size` consecutive positions. Groups and singletons are shuffled as
 * units and packed in order; when the next group does not fit in the current
 * batch it waits for the next batch that has room, and singletons fill the
 * gap. Deterministic given the seed.
 */
std::vector<std::size_t> balanced_pair_shuffle(
    std::span<const std::optional<std::int64_t>> pair_ids, std::size_t batch_size,
    std::uint64_t seed);

/// True when every pair group lies inside one batch of the ordering.
bool pairs_co_batched(std::span<const std::optional<std::int64_t>> pair_ids,
                      std::span<const std::size_t> order, std::size_t batch_size);

// Files ----------------------------------------------------------------------

using FeatureStore = std::map<std::int64_t, Tensor>;

/// Scales every nonzero row to unit L2 norm.
void l2_normalize_rows(Tensor &features);

/**
 * "VQAF", u32 version 1, u32 record count, then per record u64 id, u32 K,
 * u32 D and K*D float32 values, all little-endian. Rows are returned as
 * stored; `expected_dim` (when nonzero) is enforced for every record.
 */
FeatureStore parse_features(std::string_view bytes, std::size_t expected_dim = 0,
                            std::size_t max_regions = 100);
std::string serialize_features(const FeatureStore &store);

/// parse_features on a file, followed by row normalization.
FeatureStore load_features(const std::filesystem::path &path, std::size_t expected_dim = 0,
                           std::size_t max_regions = 100);
void write_features(const std::filesystem::path &path, const FeatureStore &store);

/// Per-answer image vectors stored as a feature file keyed by vocabulary index
/// (K = 1). Indices outside the vocabulary are rejected.
std::map<std::string, Tensor> load_answer_visual_embeddings(const std::filesystem::path &path,
                                                            const AnswerVocabulary &vocab,
                                                            std::size_t expected_dim = 0);

/// Text lines "word v1 v2 ... vD"; blank lines ignored; every line must have
/// the same D (and equal `expected_dim` when nonzero).
std::map<std::string, Tensor> parse_word_embeddings(std::string_view text,
                                                    std::size_t expected_dim = 0);
std::map<std::string, Tensor> load_word_embeddings(const std::filesystem::path &path,
                                                   std::size_t expected_dim = 0);
std::string serialize_word_embeddings(const std::map<std::string, Tensor> &table);

/// JSON Lines, one question object per line.
std::vector<RawQuestion> parse_questions(std::string_view text);
std::vector<RawQuestion> load_questions(const std::filesystem::path &path);
std::string serialize_questions(std::span<const RawQuestion> questions);

/// One entry per line.
std::vector<std::string> load_lines(const std::filesystem::path &path);
void write_lines(const std::filesystem::path &path, std::span<const std::string> lines);

} // namespace vqa::data
