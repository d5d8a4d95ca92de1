// SPDX-License-Identifier: Apache-2.0
#include <charconv>
#include <cmath>
#include <cstdio>

#include <nlohmann/json.hpp>

#include "vqa/binary_io.hpp"
#include "vqa/data.hpp"

namespace vqa::data {

using io::FormatError;
using vqa::to_string;

namespace {
constexpr std::string_view kFeatureMagic = "VQAF";
constexpr std::uint32_t kFeatureVersion = 1;

/// Splits on '\n', dropping a trailing '\r'; a final empty line is not returned.
std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  while (!text.empty()) {
    auto nl = text.find('\n');
    auto line = text.substr(0, nl);
    if (!line.empty() && line.back() == '\r')
      line.remove_suffix(1);
    lines.push_back(line);
    if (nl == std::string_view::npos)
      break;
    text.remove_prefix(nl + 1);
  }
  return lines;
}
} // namespace

void l2_normalize_rows(Tensor &features) {
  if (features.rank() != 2)
    throw ShapeError("l2_normalize_rows expects a matrix, got " + to_string(features.shape()));
  for (std::size_t r = 0; r < features.rows(); ++r) {
    auto row = features.row(r);
    double sq = 0.0;
    for (double v : row)
      sq += v * v;
    if (sq == 0.0)
      continue;
    const double norm = std::sqrt(sq);
    for (double &v : row)
      v /= norm;
  }
}

FeatureStore parse_features(std::string_view bytes, std::size_t expected_dim,
                            std::size_t max_regions) {
  io::ByteReader r(bytes);
  r.expect_magic(kFeatureMagic);
  const auto version_at = r.offset();
  if (auto v = r.u32("version"); v != kFeatureVersion)
    throw FormatError("unsupported feature file version " + std::to_string(v), version_at);
  const auto count = r.u32("record count");
  FeatureStore store;
  for (std::uint32_t n = 0; n < count; ++n) {
    const auto record_at = r.offset();
    const auto id = static_cast<std::int64_t>(r.u64("record id"));
    const auto K = r.u32("region count");
    const auto D = r.u32("feature dimension");
    if (K == 0 || K > max_regions)
      throw FormatError("record " + std::to_string(id) + " has " + std::to_string(K) +
                            " regions, expected 1 to " + std::to_string(max_regions),
                        record_at);
    if (D == 0 || (expected_dim != 0 && D != expected_dim))
      throw FormatError("dimension mismatch in record " + std::to_string(id) + ": expected " +
                            (expected_dim ? std::to_string(expected_dim) : "a positive value") +
                            ", found " + std::to_string(D),
                        record_at);
    r.require(std::uint64_t{4} * K * D, "feature values");
    Tensor t({K, D});
    for (auto &v : t.data())
      v = static_cast<double>(r.f32("feature value"));
    if (!store.emplace(id, std::move(t)).second)
      throw FormatError("duplicate record id " + std::to_string(id), record_at);
  }
  if (!r.at_end())
    throw FormatError(std::to_string(r.remaining()) + " trailing bytes after " +
                          std::to_string(count) + " records",
                      r.offset());
  return store;
}

std::string serialize_features(const FeatureStore &store) {
  io::ByteWriter w;
  w.bytes(kFeatureMagic);
  w.u32(kFeatureVersion);
  w.u32(static_cast<std::uint32_t>(store.size()));
  for (const auto &[id, t] : store) {
    if (t.rank() != 2)
      throw ShapeError("feature record " + std::to_string(id) + " must be a matrix, got " +
                       to_string(t.shape()));
    w.u64(static_cast<std::uint64_t>(id));
    w.u32(static_cast<std::uint32_t>(t.rows()));
    w.u32(static_cast<std::uint32_t>(t.cols()));
    for (double v : t.data())
      w.f32(static_cast<float>(v));
  }
  return w.take();
}

FeatureStore load_features(const std::filesystem::path &path, std::size_t expected_dim,
                           std::size_t max_regions) {
  auto store = parse_features(io::read_file(path), expected_dim, max_regions);
  for (auto &[_, t] : store)
    l2_normalize_rows(t);
  return store;
}

void write_features(const std::filesystem::path &path, const FeatureStore &store) {
  io::write_file(path, serialize_features(store));
}

std::map<std::string, Tensor> load_answer_visual_embeddings(const std::filesystem::path &path,
                                                            const AnswerVocabulary &vocab,
                                                            std::size_t expected_dim) {
  const auto store = parse_features(io::read_file(path), expected_dim, 1);
  std::map<std::string, Tensor> out;
  for (const auto &[id, t] : store) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size())
      throw std::out_of_range("answer embedding record " + std::to_string(id) +
                              " is outside the vocabulary of " + std::to_string(vocab.size()) +
                              " answers");
    out.emplace(vocab[static_cast<std::size_t>(id)], t.reshaped({t.cols()}));
  }
  return out;
}

// Word embeddings --------------------------------------------------------------

std::map<std::string, Tensor> parse_word_embeddings(std::string_view text,
                                                    std::size_t expected_dim) {
  std::map<std::string, Tensor> table;
  std::size_t dim = expected_dim;
  const auto lines = split_lines(text);
  for (std::size_t ln = 0; ln < lines.size(); ++ln) {
    auto line = lines[ln];
    const auto line_no = ln + 1;
    std::vector<std::string_view> fields;
    std::size_t i = 0;
    while (i < line.size()) {
      while (i < line.size() && (line[i] == ' ' || line[i] == '\t'))
        ++i;
      const auto start = i;
      while (i < line.size() && line[i] != ' ' && line[i] != '\t')
        ++i;
      if (i > start)
        fields.push_back(line.substr(start, i - start));
    }
    if (fields.empty())
      continue;
    const auto values = fields.size() - 1;
    if (values == 0 || (dim != 0 && values != dim))
      throw FormatError("dimension mismatch for word '" + std::string(fields[0]) +
                            "': expected " + (dim ? std::to_string(dim) : "at least 1") +
                            " values, found " + std::to_string(values),
                        line_no);
    dim = values;
    Tensor v({dim});
    for (std::size_t j = 0; j < dim; ++j) {
      const auto f = fields[j + 1];
      auto [end, ec] = std::from_chars(f.data(), f.data() + f.size(), v[j]);
      if (ec != std::errc() || end != f.data() + f.size())
        throw FormatError("bad number '" + std::string(f) + "' for word '" +
                              std::string(fields[0]) + "'",
                          line_no);
    }
    if (!table.emplace(std::string(fields[0]), std::move(v)).second)
      throw FormatError("duplicate word '" + std::string(fields[0]) + "'", line_no);
  }
  return table;
}

std::map<std::string, Tensor> load_word_embeddings(const std::filesystem::path &path,
                                                   std::size_t expected_dim) {
  return parse_word_embeddings(io::read_file(path), expected_dim);
}

std::string serialize_word_embeddings(const std::map<std::string, Tensor> &table) {
  std::string out;
  char buf[32];
  for (const auto &[word, v] : table) {
    out += word;
    for (double x : v.data()) {
      auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
      out += ' ';
      out.append(buf, end);
    }
    out += '\n';
  }
  return out;
}

// Questions ----------------------------------------------------------------------

std::vector<RawQuestion> parse_questions(std::string_view text) {
  using nlohmann::json;
  std::vector<RawQuestion> out;
  const auto lines = split_lines(text);
  for (std::size_t ln = 0; ln < lines.size(); ++ln) {
    const auto line_no = ln + 1;
    if (lines[ln].find_first_not_of(" \t") == std::string_view::npos)
      continue;
    json j;
    try {
      j = json::parse(lines[ln]);
    } catch (const json::parse_error &e) {
      throw FormatError(std::string("invalid JSON: ") + e.what(), line_no);
    }
    try {
      RawQuestion q;
      q.question_id = j.at("question_id").get<std::int64_t>();
      q.image_id = j.at("image_id").get<std::int64_t>();
      q.question = j.at("question").get<std::string>();
      if (j.contains("answers")) {
        q.answers = j.at("answers").get<std::vector<std::string>>();
        if (q.answers.size() != 10)
          throw FormatError("question " + std::to_string(q.question_id) + " has " +
                                std::to_string(q.answers.size()) +
                                " annotator answers, expected 10",
                            line_no);
      }
      if (j.contains("answer"))
        q.answer = j.at("answer").get<std::string>();
      if (j.contains("answer_type"))
        q.answer_type = parse_answer_type(j.at("answer_type").get<std::string>());
      if (j.contains("pair_id"))
        q.pair_id = j.at("pair_id").get<std::int64_t>();
      out.push_back(std::move(q));
    } catch (const json::exception &e) {
      throw FormatError(std::string("bad question record: ") + e.what(), line_no);
    } catch (const std::invalid_argument &e) {
      throw FormatError(e.what(), line_no);
    }
  }
  return out;
}

std::vector<RawQuestion> load_questions(const std::filesystem::path &path) {
  return parse_questions(io::read_file(path));
}

std::string serialize_questions(std::span<const RawQuestion> questions) {
  std::string out;
  for (const auto &q : questions) {
    nlohmann::json j = {
        {"question_id", q.question_id}, {"image_id", q.image_id}, {"question", q.question}};
    if (!q.answers.empty())
      j["answers"] = q.answers;
    if (q.answer)
      j["answer"] = *q.answer;
    if (q.answer_type)
      j["answer_type"] = to_string(*q.answer_type);
    if (q.pair_id)
      j["pair_id"] = *q.pair_id;
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<std::string> load_lines(const std::filesystem::path &path) {
  const auto text = io::read_file(path);
  std::vector<std::string> out;
  for (auto line : split_lines(text))
    out.emplace_back(line);
  return out;
}

void write_lines(const std::filesystem::path &path, std::span<const std::string> lines) {
  std::string out;
  for (const auto &l : lines) {
    out += l;
    out += '\n';
  }
  io::write_file(path, out);
}

} // namespace vqa::data
