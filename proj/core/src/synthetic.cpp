// SPDX-License-Identifier: Apache-2.0
#include "vqa/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "vqa/binary_io.hpp"
#include "vqa/rng.hpp"

namespace vqa::synth {

namespace {

const std::vector<std::string> kColors = {"red", "green", "blue", "yellow"};
const std::vector<std::string> kMaterials = {"wood", "metal", "glass", "cloth"};
const std::vector<std::string> kTones = {"pale", "deep", "dull", "bright"};
const std::string kMixedAnswer = "colorful";
const std::string kDarkAnswer = "dark";
const std::vector<std::string> kQuestionWords = {
    "looking", "closely", "at", "this", "picture", "can", "you", "tell",
    "me",      "what",    "color", "is", "the",   "made", "of"};

enum class Attribute { color, material };

struct Region {
  std::size_t type = 0;
  std::size_t color = 0;
  std::size_t material = 0;
  std::size_t tone = 0;
  bool mixed = false;
  bool dark = false;
};

struct Layout {
  std::size_t types;
  std::size_t tones = 0;
  std::size_t color_at() const { return types; }
  std::size_t mixed_at() const { return types + kColors.size(); }
  std::size_t dark_at() const { return mixed_at() + 1; }
  std::size_t material_at() const { return dark_at() + 1; }
  std::size_t tone_at() const { return material_at() + kMaterials.size(); }
  std::size_t used() const { return tone_at() + tones; }
};

std::string question_text(Attribute a, const std::string &type) {
  // Fourteen words each, so the key words sit right before the end of the
  // encoder's fixed-length window.
  return a == Attribute::color
             ? "looking closely at this picture can you tell me what color is the " + type
             : "looking at this picture can you tell me what the " + type + " is made of";
}

class Generator {
public:
  explicit Generator(const SynthSpec &spec)
      : spec_(spec), rng_(spec.seed), layout_{spec.region_types, spec.tones} {}

  SynthDataset run() {
    SynthDataset ds;
    for (std::size_t c = 0; c < kColors.size(); ++c)
      for (std::size_t t = 0; t < std::max<std::size_t>(spec_.tones, 1); ++t)
        ds.answers.push_back(color_answer(c, t));
    ds.answers.insert(ds.answers.end(), kMaterials.begin(), kMaterials.end());
    ds.answers.push_back(kMixedAnswer);
    ds.answers.push_back(kDarkAnswer);
    make_split(spec_.num_train, ds.train, ds);
    make_split(spec_.num_val, ds.val, ds);
    make_embeddings(ds);
    return ds;
  }

private:
  struct Question {
    Attribute attribute;
    std::size_t type;
    bool multi;
  };

  void make_split(std::size_t count, std::vector<data::RawQuestion> &out, SynthDataset &ds) {
    std::size_t made = 0;
    while (made < count) {
      const bool pair = count - made >= 2 && rng_.uniform() < spec_.pair_fraction;
      Question q = draw_question();
      if (!pair) {
        out.push_back(ask(q, std::nullopt, std::nullopt, ds));
        ++made;
        continue;
      }
      const auto pair_id = next_pair_id_++;
      auto first = ask(q, pair_id, std::nullopt, ds);
      const auto first_answer = primary_answer(first);
      out.push_back(std::move(first));
      out.push_back(ask(q, pair_id, first_answer, ds));
      made += 2;
    }
  }

  Question draw_question() {
    Question q;
    q.type = static_cast<std::size_t>(rng_.below(spec_.region_types));
    q.multi = rng_.uniform() < spec_.multi_answer_fraction;
    q.attribute = !q.multi && rng_.uniform() < spec_.material_fraction ? Attribute::material
                                                                        : Attribute::color;
    return q;
  }

  std::string color_answer(std::size_t color, std::size_t tone) const {
    return spec_.tones == 0 ? kColors[color] : kTones[tone] + "-" + kColors[color];
  }

  static std::string primary_answer(const data::RawQuestion &q) {
    return q.answers.front(); // the 1.0 answer always comes first
  }

  /// One question on a fresh image; `avoid` forces a different primary answer.
  data::RawQuestion ask(const Question &q, std::optional<std::int64_t> pair_id,
                        const std::optional<std::string> &avoid, SynthDataset &ds) {
    for (;;) {
      std::vector<Region> regions;
      std::size_t target = 0;
      std::vector<std::string> answers = draw_image(q, regions, target);
      if (avoid && answers.front() == *avoid)
        continue;
      data::RawQuestion raw;
      raw.question_id = next_question_id_++;
      raw.image_id = next_image_id_++;
      raw.question = question_text(q.attribute, type_names()[q.type]);
      raw.answers = std::move(answers);
      raw.answer_type = data::AnswerType::other;
      raw.pair_id = pair_id;
      ds.features.emplace(raw.image_id, encode(regions));
      ds.target_region.emplace(raw.question_id, target);
      return raw;
    }
  }

  std::vector<std::string> draw_image(const Question &q, std::vector<Region> &regions,
                                      std::size_t &target) {
    const auto K = spec_.regions_per_image;
    std::vector<std::size_t> others;
    for (std::size_t t = 0; t < spec_.region_types; ++t)
      if (t != q.type)
        others.push_back(t);
    rng_.shuffle(others);
    target = static_cast<std::size_t>(rng_.below(K));
    regions.assign(K, Region{});
    for (std::size_t k = 0, o = 0; k < K; ++k) {
      auto &r = regions[k];
      r.type = k == target ? q.type : others[o++];
      r.color = static_cast<std::size_t>(rng_.below(kColors.size()));
      r.material = static_cast<std::size_t>(rng_.below(kMaterials.size()));
      if (spec_.tones > 0)
        r.tone = static_cast<std::size_t>(rng_.below(spec_.tones));
      if (spec_.multi_answer_fraction > 0.0 && k != target) {
        const double u = rng_.uniform();
        r.dark = u < 0.1;
        r.mixed = u >= 0.1 && u < 0.2;
      }
    }
    auto &t = regions[target];
    std::vector<std::string> answers;
    if (!q.multi) {
      const auto a = q.attribute == Attribute::color ? color_answer(t.color, t.tone)
                                                     : kMaterials[t.material];
      return std::vector<std::string>(10, a);
    }
    if (rng_.uniform() < 0.4) {
      t.dark = true;
      answers.assign(8, color_answer(t.color, t.tone));
      answers.insert(answers.end(), 2, kDarkAnswer);
    } else {
      t.mixed = true;
      answers.assign(8, color_answer(t.color, t.tone)); // the features hide this color
      answers.insert(answers.end(), 2, kMixedAnswer);
    }
    return answers;
  }

  Tensor encode(const std::vector<Region> &regions) {
    Tensor f({regions.size(), spec_.feature_dim});
    for (std::size_t k = 0; k < regions.size(); ++k) {
      const auto &r = regions[k];
      auto row = f.row(k);
      row[r.type] = 2.0;
      if (!r.mixed)
        row[layout_.color_at() + r.color] = r.dark ? 0.5 : 1.0; // dark regions show a dimmer color
      row[layout_.mixed_at()] = r.mixed ? 1.0 : 0.0;
      row[layout_.dark_at()] = r.dark ? 1.0 : 0.0;
      row[layout_.material_at() + r.material] = 1.0;
      if (spec_.tones > 0)
        row[layout_.tone_at() + r.tone] = 1.0;
      for (std::size_t j = 0; j < row.size(); ++j)
        row[j] += spec_.feature_noise * rng_.normal();
    }
    return f;
  }

  Tensor random_vector(double scale) {
    Tensor v({spec_.embed_dim});
    for (auto &x : v.data())
      x = scale * rng_.normal() / std::sqrt(static_cast<double>(spec_.embed_dim));
    return v;
  }

  void make_embeddings(SynthDataset &ds) {
    const Tensor color_center = random_vector(1.0);
    const Tensor material_center = random_vector(1.0);
    const Tensor modifier_center = random_vector(1.0);
    auto near = [&](const Tensor &center, double spread) {
      auto v = random_vector(spread);
      for (std::size_t i = 0; i < v.size(); ++i)
        v[i] += center[i];
      return v;
    };
    // A toned color answer sums the vectors of its hue and its tone, so
    // answers that share either factor lie close together.
    std::vector<Tensor> hues, tones;
    for (std::size_t c = 0; c < kColors.size(); ++c)
      hues.push_back(near(color_center, 0.5));
    for (std::size_t t = 0; t < spec_.tones; ++t)
      tones.push_back(random_vector(1.0));
    for (std::size_t c = 0; c < kColors.size(); ++c) {
      if (spec_.tones == 0) {
        ds.word_embeddings.emplace(kColors[c], hues[c]);
        continue;
      }
      for (std::size_t t = 0; t < spec_.tones; ++t) {
        auto v = random_vector(0.1);
        for (std::size_t i = 0; i < v.size(); ++i)
          v[i] += hues[c][i] + tones[t][i];
        ds.word_embeddings.emplace(color_answer(c, t), std::move(v));
      }
    }
    for (const auto &m : kMaterials)
      ds.word_embeddings.emplace(m, near(material_center, 0.5));
    ds.word_embeddings.emplace(kMixedAnswer, near(modifier_center, 0.5));
    ds.word_embeddings.emplace(kDarkAnswer, near(modifier_center, 0.5));
    for (const auto &w : kQuestionWords) {
      if (w == "color")
        ds.word_embeddings.emplace(w, near(color_center, 0.2));
      else if (w == "made")
        ds.word_embeddings.emplace(w, near(material_center, 0.2));
      else
        ds.word_embeddings.emplace(w, random_vector(1.0));
    }
    for (std::size_t t = 0; t < spec_.region_types; ++t)
    {
      auto v = random_vector(0.1);
      v[t % spec_.embed_dim] += 1.0;
      ds.word_embeddings.emplace(type_names()[t], std::move(v));
    }

    auto prototype = [&](std::size_t slot) {
      Tensor v({spec_.feature_dim});
      v[slot] = 1.0;
      return v;
    };
    for (std::size_t c = 0; c < kColors.size(); ++c)
      for (std::size_t t = 0; t < std::max<std::size_t>(spec_.tones, 1); ++t) {
        auto v = prototype(layout_.color_at() + c);
        if (spec_.tones > 0)
          v[layout_.tone_at() + t] = 1.0;
        ds.answer_visual_embeddings.emplace(color_answer(c, t), std::move(v));
      }
    for (std::size_t m = 0; m < kMaterials.size(); ++m)
      ds.answer_visual_embeddings.emplace(kMaterials[m], prototype(layout_.material_at() + m));
    ds.answer_visual_embeddings.emplace(kMixedAnswer, prototype(layout_.mixed_at()));
    ds.answer_visual_embeddings.emplace(kDarkAnswer, prototype(layout_.dark_at()));
  }

  const SynthSpec &spec_;
  Rng rng_;
  Layout layout_;
  std::int64_t next_question_id_ = 1;
  std::int64_t next_image_id_ = 1;
  std::int64_t next_pair_id_ = 1;
};

std::size_t argmax_block(std::span<const double> row, std::size_t at, std::size_t n) {
  return static_cast<std::size_t>(
      std::max_element(row.begin() + static_cast<std::ptrdiff_t>(at),
                       row.begin() + static_cast<std::ptrdiff_t>(at + n)) -
      (row.begin() + static_cast<std::ptrdiff_t>(at)));
}

} // namespace

const std::vector<std::string> &type_names() {
  static const std::vector<std::string> names = {"ball", "box", "cup",  "dog",  "hat",  "key",
                                                  "lamp", "pen", "book", "fork", "vase", "shoe"};
  return names;
}

void SynthSpec::validate() const {
  Layout layout{region_types, tones};
  if (region_types == 0 || region_types > type_names().size())
    throw std::invalid_argument("region_types must be between 1 and " +
                                std::to_string(type_names().size()));
  if (regions_per_image == 0 || regions_per_image > region_types)
    throw std::invalid_argument("regions_per_image must be between 1 and region_types");
  if (feature_dim < layout.used())
    throw std::invalid_argument("feature_dim must be at least " + std::to_string(layout.used()));
  if (tones > kTones.size())
    throw std::invalid_argument("tones must be at most " + std::to_string(kTones.size()));
  if (embed_dim == 0)
    throw std::invalid_argument("embed_dim must be positive");
  for (double p : {pair_fraction, multi_answer_fraction, material_fraction})
    if (!(p >= 0.0 && p <= 1.0))
      throw std::invalid_argument("fractions must lie in [0, 1]");
  if (!(feature_noise >= 0.0))
    throw std::invalid_argument("feature_noise must be non-negative");
}

nlohmann::json SynthSpec::to_json() const {
  return {{"num_train", num_train},
          {"num_val", num_val},
          {"regions_per_image", regions_per_image},
          {"region_types", region_types},
          {"feature_dim", feature_dim},
          {"embed_dim", embed_dim},
          {"pair_fraction", pair_fraction},
          {"multi_answer_fraction", multi_answer_fraction},
          {"material_fraction", material_fraction},
          {"feature_noise", feature_noise},
          {"tones", tones},
          {"seed", seed}};
}

SynthSpec SynthSpec::from_json(const nlohmann::json &j) {
  SynthSpec s;
  const auto defaults = s.to_json();
  for (const auto &[key, value] : j.items()) {
    if (!defaults.contains(key))
      throw std::invalid_argument("synthetic spec: unknown key '" + key + "'");
    if (!value.is_number())
      throw std::invalid_argument("synthetic spec: '" + key + "' must be a number");
  }
  auto get = [&](const char *key, auto &out) {
    if (j.contains(key))
      out = j.at(key).get<std::remove_reference_t<decltype(out)>>();
  };
  get("num_train", s.num_train);
  get("num_val", s.num_val);
  get("regions_per_image", s.regions_per_image);
  get("region_types", s.region_types);
  get("feature_dim", s.feature_dim);
  get("embed_dim", s.embed_dim);
  get("pair_fraction", s.pair_fraction);
  get("multi_answer_fraction", s.multi_answer_fraction);
  get("material_fraction", s.material_fraction);
  get("feature_noise", s.feature_noise);
  get("tones", s.tones);
  get("seed", s.seed);
  s.validate();
  return s;
}

SynthDataset generate(const SynthSpec &spec) {
  spec.validate();
  return Generator(spec).run();
}

std::string oracle_answer(const data::RawQuestion &q, const Tensor &image_features,
                          const SynthSpec &spec) {
  const auto tokens = data::tokenize(q.question);
  const bool color = std::find(tokens.begin(), tokens.end(), "color") != tokens.end();
  const auto &names = type_names();
  std::size_t type = names.size();
  for (const auto &t : tokens)
    if (auto it = std::find(names.begin(), names.end(), t); it != names.end())
      type = static_cast<std::size_t>(it - names.begin());
  if (type >= spec.region_types)
    throw std::invalid_argument("question does not name a known object: " + q.question);

  const Layout layout{spec.region_types, spec.tones};
  std::size_t best = 0;
  for (std::size_t k = 1; k < image_features.rows(); ++k)
    if (image_features.at(k, type) > image_features.at(best, type))
      best = k;
  const auto row = image_features.row(best);
  if (!color)
    return kMaterials[argmax_block(row, layout.material_at(), kMaterials.size())];
  // A mixed region hides its color; "colorful" is then the best bet (0.6
  // against a 1-in-4 chance of the hidden color).
  if (row[layout.mixed_at()] > 0.5)
    return kMixedAnswer;
  const auto &hue = kColors[argmax_block(row, layout.color_at(), kColors.size())];
  if (spec.tones == 0)
    return hue;
  return kTones[argmax_block(row, layout.tone_at(), spec.tones)] + "-" + hue;
}

model::ModelConfig PreparedTask::model_config(std::size_t hidden_dim) const {
  model::ModelConfig c;
  c.hidden_dim = hidden_dim;
  c.vocab_size = questions.size();
  c.num_answers = answers.size();
  c.embed_dim = embed_dim;
  if (!features.empty())
    c.feature_dim = features.begin()->second.cols();
  return c;
}

PreparedTask prepare(const SynthDataset &ds, std::int64_t threshold) {
  PreparedTask task;
  task.questions = data::QuestionVocab::build(ds.train);
  task.answers = data::build_answer_vocab(ds.train, threshold);
  for (const auto &q : ds.train)
    task.train.push_back(data::make_instance(q, task.questions, task.answers, data::Split::train));
  for (const auto &q : ds.val)
    task.val.push_back(data::make_instance(q, task.questions, task.answers, data::Split::val));
  task.features = ds.features;
  task.embed_dim = ds.word_embeddings.empty() ? 0 : ds.word_embeddings.begin()->second.size();
  for (auto &[_, f] : task.features)
    data::l2_normalize_rows(f);
  return task;
}

void write_dataset(const std::filesystem::path &dir, const SynthDataset &ds,
                   const SynthSpec &spec) {
  std::filesystem::create_directories(dir);
  io::write_file(dir / "questions_train.jsonl", data::serialize_questions(ds.train));
  io::write_file(dir / "questions_val.jsonl", data::serialize_questions(ds.val));
  data::write_features(dir / "features.bin", ds.features);
  io::write_file(dir / "word_embeddings.txt", data::serialize_word_embeddings(ds.word_embeddings));
  data::write_lines(dir / "answers.txt", ds.answers);
  data::FeatureStore visual;
  for (std::size_t i = 0; i < ds.answers.size(); ++i) {
    const auto &v = ds.answer_visual_embeddings.at(ds.answers[i]);
    visual.emplace(static_cast<std::int64_t>(i), v.reshaped({1, v.size()}));
  }
  data::write_features(dir / "answer_visual.bin", visual);
  std::string targets;
  for (const auto &[qid, region] : ds.target_region)
    targets += nlohmann::json{{"question_id", qid}, {"region", region}}.dump() + "\n";
  io::write_file(dir / "target_regions.jsonl", targets);
  io::write_file(dir / "synth_spec.json", spec.to_json().dump(2) + "\n");
}

} // namespace vqa::synth
