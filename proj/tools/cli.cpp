// SPDX-License-Identifier: Apache-2.0
#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>

#include <CLI11.hpp>

#include "vqa/binary_io.hpp"
#include "vqa/grad_check.hpp"
#include "vqa/metrics.hpp"
#include "vqa/rng.hpp"
#include "vqa/synthetic.hpp"
#include "vqa/training.hpp"

namespace vqa::cli {

namespace fs = std::filesystem;

namespace {

/// Raised for problems with the invocation or configuration (exit code 1).
class UsageError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos)
    return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

template <typename T> CLI::Option *scalar(CLI::App *app, const std::string &name, T &value,
                                          const std::string &help) {
  return app->add_option("--" + name, value, help)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
}

// Shared option groups ---------------------------------------------------------

struct ModelOptions {
  std::size_t hidden_dim = 512;
  std::size_t embed_dim = 300;
  std::size_t feature_dim = 2048;
  std::size_t max_question_len = 14;
  std::size_t attention_heads = 1;
  std::string question_encoder = "gru_forward";
  std::string activation = "gated_tanh";
  std::string output_head = "sigmoid_decomposed";
  std::string attention_norm = "softmax";

  void bind(CLI::App *app) {
    scalar(app, "hidden_dim", hidden_dim, "Width of the joint embedding");
    scalar(app, "embed_dim", embed_dim, "Word embedding width");
    scalar(app, "feature_dim", feature_dim, "Region feature width");
    scalar(app, "max_question_len", max_question_len, "Question length in tokens");
    scalar(app, "attention_heads", attention_heads, "Attention heads (1 or 2)");
    scalar(app, "question_encoder", question_encoder,
           "gru_forward | gru_backward | gru_2layer | bow_sum | bow_average");
    scalar(app, "activation", activation, "gated_tanh | gated_relu | tanh | relu");
    scalar(app, "output_head", output_head, "sigmoid_decomposed | sigmoid_single | softmax");
    scalar(app, "attention_norm", attention_norm, "softmax | sigmoid");
  }

  model::ModelConfig to_config(std::size_t vocab_size, std::size_t num_answers) const {
    model::ModelConfig c;
    c.hidden_dim = hidden_dim;
    c.embed_dim = embed_dim;
    c.feature_dim = feature_dim;
    c.max_question_len = max_question_len;
    c.attention_heads = attention_heads;
    c.question_encoder = model::parse_question_encoder(question_encoder);
    c.activation = nn::parse_activation(activation);
    c.output_head = model::parse_output_head(output_head);
    c.attention_norm = nn::parse_attention_norm(attention_norm);
    c.vocab_size = vocab_size;
    c.num_answers = num_answers;
    c.validate();
    return c;
  }
};

struct TrainOptions {
  std::size_t batch_size = 512;
  std::size_t max_epochs = 20;
  std::uint64_t seed = 0;
  std::string target_mode = "soft";
  std::string shuffle_mode = "balanced_pairs";
  double rho = 0.95;
  double epsilon = 1e-6;
  std::optional<std::size_t> patience;
  std::optional<double> stop_at_score;

  void bind(CLI::App *app) {
    scalar(app, "batch_size", batch_size, "Questions per mini-batch");
    scalar(app, "max_epochs", max_epochs, "Upper bound on training epochs");
    scalar(app, "seed", seed, "Seed for initialization and shuffling");
    scalar(app, "target_mode", target_mode, "soft | binary_gt0 | binary_eq1");
    scalar(app, "shuffle_mode", shuffle_mode, "balanced_pairs | random");
    scalar(app, "rho", rho, "AdaDelta decay");
    scalar(app, "epsilon", epsilon, "AdaDelta epsilon");
    scalar(app, "patience", patience, "Stop after this many epochs without improvement");
    scalar(app, "stop_at_score", stop_at_score, "Stop once the validation score reaches this");
  }

  train::TrainConfig to_config() const {
    train::TrainConfig c;
    c.batch_size = batch_size;
    c.max_epochs = max_epochs;
    c.seed = seed;
    c.target_mode = train::parse_target_mode(target_mode);
    c.shuffle_mode = train::parse_shuffle_mode(shuffle_mode);
    c.rho = rho;
    c.epsilon = epsilon;
    c.patience = patience;
    c.stop_at_score = stop_at_score;
    c.validate();
    return c;
  }
};

struct DataOptions {
  std::string train_questions;
  std::string val_questions;
  std::string vg_questions;
  std::string features;
  std::string word_embeddings;
  std::string answers;
  std::string answer_visual;
  std::int64_t threshold = 8;
  std::size_t max_regions = 100;

  void bind(CLI::App *app) {
    scalar(app, "train_questions", train_questions, "Training questions (JSON Lines)")
        ->required();
    scalar(app, "val_questions", val_questions, "Validation questions (JSON Lines)");
    scalar(app, "vg_questions", vg_questions, "Extra single-answer questions to merge");
    scalar(app, "features", features, "Region feature file")->required();
    scalar(app, "word_embeddings", word_embeddings, "Pretrained word vectors (text)");
    scalar(app, "answers", answers, "Answer vocabulary file; built from training if unset");
    scalar(app, "answer_visual", answer_visual, "Per-answer visual embeddings");
    scalar(app, "threshold", threshold, "Keep answers given more than this many times");
    scalar(app, "max_regions", max_regions, "Upper bound on regions per image");
  }

  void validate() const {
    if (threshold < 0)
      throw std::invalid_argument("threshold must be non-negative");
  }
};

struct Experiment {
  ModelOptions model;
  TrainOptions train;
  DataOptions data;
  std::string classifier_init = "none";
  bool retrain = false;
  std::string output_dir;

  void bind(CLI::App *app, bool with_output = true) {
    model.bind(app);
    train.bind(app);
    data.bind(app);
    scalar(app, "classifier_init", classifier_init, "none | copy | shuffle");
    app->add_flag("--retrain_with_val", retrain,
                  "Retrain on train+val for the best epoch count afterwards");
    if (with_output)
      scalar(app, "output_dir", output_dir, "Directory for all outputs")->required();
    else
      scalar(app, "output_dir", output_dir, "Optional directory for the files of every run");
  }

  void validate() const {
    model.to_config(2, 1);
    const auto tc = train.to_config();
    require_pairing_of(tc);
    data.validate();
    if (classifier_init != "none" && classifier_init != "copy" && classifier_init != "shuffle")
      throw std::invalid_argument("classifier_init must be none, copy or shuffle");
    if (classifier_init != "none") {
      if (model.output_head != "sigmoid_decomposed")
        throw std::invalid_argument("classifier_init needs output_head=sigmoid_decomposed");
      if (data.word_embeddings.empty() || data.answer_visual.empty())
        throw std::invalid_argument("classifier_init needs word_embeddings and answer_visual");
    }
    if (retrain && data.val_questions.empty())
      throw std::invalid_argument("retrain_with_val needs val_questions");
  }

  void require_pairing_of(const train::TrainConfig &tc) const {
    const auto head = model::parse_output_head(model.output_head);
    train::require_pairing(head, tc.loss.value_or(train::loss_for(head)));
  }
};

// Loaded experiment data ---------------------------------------------------------

struct LoadedData {
  data::QuestionVocab questions;
  data::AnswerVocabulary answers;
  std::vector<data::QAInstance> train;
  std::vector<data::QAInstance> val;
  data::FeatureStore features;
  std::map<std::string, Tensor> word_vectors;
};

LoadedData load_data(const Experiment &ex) {
  LoadedData d;
  const auto &o = ex.data;
  const auto raw_train = data::load_questions(o.train_questions);
  const auto raw_val =
      o.val_questions.empty() ? std::vector<data::RawQuestion>{}
                              : data::load_questions(o.val_questions);
  d.questions = data::QuestionVocab::build(raw_train);
  if (o.answers.empty())
    d.answers = data::build_answer_vocab(raw_train, o.threshold);
  else
    d.answers = data::AnswerVocabulary(data::load_lines(o.answers), o.threshold);
  if (d.answers.size() == 0)
    throw std::runtime_error("the answer vocabulary is empty (threshold " +
                             std::to_string(o.threshold) + ")");
  const auto len = ex.model.max_question_len;
  for (const auto &q : raw_train)
    d.train.push_back(data::make_instance(q, d.questions, d.answers, data::Split::train, len));
  if (!o.vg_questions.empty())
    d.train = data::merge_visual_genome(std::move(d.train), data::load_questions(o.vg_questions),
                                        d.questions, d.answers, len);
  for (const auto &q : raw_val)
    d.val.push_back(data::make_instance(q, d.questions, d.answers, data::Split::val, len));
  d.features = data::load_features(o.features, ex.model.feature_dim, o.max_regions);
  if (!o.word_embeddings.empty())
    d.word_vectors = data::load_word_embeddings(o.word_embeddings, ex.model.embed_dim);
  return d;
}

model::VqaModel make_model(const Experiment &ex, const LoadedData &d) {
  model::VqaModel m(ex.model.to_config(d.questions.size(), d.answers.size()), ex.train.seed);
  if (!d.word_vectors.empty())
    model::init_word_embeddings(m, d.questions.words(), d.word_vectors);
  if (ex.classifier_init != "none") {
    const auto visual = data::load_answer_visual_embeddings(ex.data.answer_visual, d.answers,
                                                            ex.model.feature_dim);
    model::init_output_classifier(
        m, d.answers.answers(), d.word_vectors, visual,
        ex.classifier_init == "copy" ? model::ClassifierInit::copy : model::ClassifierInit::shuffle,
        ex.train.seed);
  }
  return m;
}

nlohmann::json vocab_metadata(const LoadedData &d) {
  return {{"question_vocab", d.questions.words()},
          {"answers", d.answers.answers()},
          {"threshold", d.answers.threshold()}};
}

// Commands -----------------------------------------------------------------------

void write_text(const fs::path &path, const std::string &text) { io::write_file(path, text); }

int cmd_build_vocab(const std::string &questions, std::int64_t threshold,
                    const std::string &output, std::ostream &out) {
  const auto vocab = data::build_answer_vocab(data::load_questions(questions), threshold);
  data::write_lines(output, vocab.answers());
  out << vocab.size() << " answers given more than " << threshold << " times written to "
      << output << "\n";
  return kExitOk;
}

int cmd_synth(const synth::SynthSpec &spec, const std::string &output_dir,
              const std::string &echo, std::ostream &out) {
  const auto ds = synth::generate(spec);
  synth::write_dataset(output_dir, ds, spec);
  write_text(fs::path(output_dir) / "config.ini", echo);
  out << "wrote " << ds.train.size() << " training and " << ds.val.size()
      << " validation questions to " << output_dir << "\n";
  return kExitOk;
}

struct RunOutcome {
  train::TrainResult result;
  std::optional<double> best_score;
};

RunOutcome train_once(const Experiment &ex, const LoadedData &d,
                      const std::optional<fs::path> &dir) {
  auto m = make_model(ex, d);
  RunOutcome outcome;
  outcome.result = train::train(m, {d.train, d.val, d.features}, ex.train.to_config(), dir);
  if (const auto &best = outcome.result.log.best_epoch)
    outcome.best_score = outcome.result.log.epochs.at(*best - 1).val_score;
  return outcome;
}

std::string with_metadata(const std::string &checkpoint, const nlohmann::json &extra) {
  auto loaded = model::load_checkpoint(checkpoint);
  auto meta = loaded.metadata;
  meta.update(extra);
  return model::save_checkpoint(loaded.model, meta);
}

int cmd_train(const Experiment &ex, const std::string &echo, std::ostream &out) {
  const fs::path dir = ex.output_dir;
  fs::create_directories(dir);
  write_text(dir / "config.ini", echo);
  const auto d = load_data(ex);
  data::write_lines(dir / "answers.txt", d.answers.answers());
  data::write_lines(dir / "question_vocab.txt", d.questions.words());

  const auto outcome = train_once(ex, d, dir);
  const auto meta = vocab_metadata(d);
  write_text(dir / "best.vqac", with_metadata(outcome.result.best_checkpoint, meta));
  const auto &log = outcome.result.log;
  out << "trained " << log.epochs.size() << " epochs";
  if (log.best_epoch)
    out << "; best epoch " << *log.best_epoch << " with validation score "
        << *outcome.best_score;
  out << "\n";

  if (ex.retrain) {
    auto make = [&] { return make_model(ex, d); };
    const auto final_model = train::retrain_with_val(log, make, d.train, d.val, d.features,
                                                     ex.train.to_config());
    auto final_meta = meta;
    final_meta["epochs"] = *log.best_epoch;
    final_meta["seed"] = ex.train.seed;
    write_text(dir / "final.vqac", model::save_checkpoint(final_model, final_meta));
    out << "retrained on train+val for " << *log.best_epoch << " epochs\n";
  }
  return kExitOk;
}

struct EvalInputs {
  data::QuestionVocab questions;
  data::AnswerVocabulary answers;
  std::vector<data::QAInstance> instances;
};

EvalInputs eval_inputs(const nlohmann::json &meta, const std::string &questions_path,
                       std::size_t max_len) {
  if (!meta.contains("answers") || !meta.contains("question_vocab"))
    throw std::runtime_error("checkpoint carries no vocabularies; use one written by 'train'");
  const auto words = meta.at("question_vocab").get<std::vector<std::string>>();
  EvalInputs in;
  in.questions = data::QuestionVocab(std::vector<std::string>(words.begin() + 2, words.end()));
  in.answers = data::AnswerVocabulary(meta.at("answers").get<std::vector<std::string>>(),
                                      meta.value("threshold", std::int64_t{0}));
  for (const auto &q : data::load_questions(questions_path))
    in.instances.push_back(
        data::make_instance(q, in.questions, in.answers, data::Split::val, max_len));
  return in;
}

void write_reports(const fs::path &dir, const metrics::Predictions &preds,
                   const EvalInputs &in, std::ostream &out) {
  const auto report = metrics::evaluate(preds, in.instances);
  write_text(dir / "report.json", report.to_json().dump(2) + "\n");
  write_text(dir / "predictions.jsonl", metrics::serialize_predictions(preds, in.answers));
  const auto recall =
      metrics::answer_recall(preds, metrics::ground_truth(in.instances), in.answers.size());
  write_text(dir / "answer_recall.json", recall.to_json(in.answers).dump(2) + "\n");
  std::string csv = "answer,recall,support\n";
  for (const auto &e : recall.entries)
    csv += in.answers[e.answer] + "," + std::to_string(e.recall) + "," +
           std::to_string(e.support) + "\n";
  write_text(dir / "answer_recall.csv", csv);
  out << "overall " << report.overall;
  if (report.pair_accuracy)
    out << ", pairs " << *report.pair_accuracy;
  out << " over " << report.question_count << " questions\n";
}

int cmd_eval(const std::string &checkpoint, const std::string &questions,
             const std::string &features, std::size_t max_regions, const std::string &output_dir,
             std::ostream &out) {
  auto loaded = model::load_checkpoint(io::read_file(checkpoint));
  const auto &cfg = loaded.model.config();
  const auto in = eval_inputs(loaded.metadata, questions, cfg.max_question_len);
  const auto store = data::load_features(features, cfg.feature_dim, max_regions);
  // Answers come from the scores as stored, so fusing a single score file
  // later reproduces them exactly.
  const auto scores =
      metrics::round_to_stored_precision(metrics::score_all(loaded.model, in.instances, store));
  const fs::path dir = output_dir;
  fs::create_directories(dir);
  write_text(dir / "scores.vqas", metrics::serialize_scores(scores));
  data::write_lines(dir / "answers.txt", in.answers.answers());
  write_reports(dir, metrics::predict_all(scores), in, out);
  return kExitOk;
}

int cmd_ensemble(const std::vector<std::string> &score_files, const std::string &checkpoint,
                 const std::string &questions, const std::string &output_dir, std::ostream &out) {
  const auto meta = model::load_checkpoint(io::read_file(checkpoint)).metadata;
  const auto in = eval_inputs(meta, questions, model::ModelConfig{}.max_question_len);
  std::vector<metrics::ScoreTable> tables;
  for (const auto &f : score_files)
    tables.push_back(metrics::parse_scores(io::read_file(f)));
  metrics::ScoreTable fused;
  metrics::Predictions preds;
  for (const auto &inst : in.instances) {
    std::vector<Tensor> vectors;
    for (std::size_t e = 0; e < tables.size(); ++e) {
      auto it = tables[e].find(inst.question_id);
      if (it == tables[e].end())
        throw std::runtime_error("score file " + score_files[e] + " has no scores for question " +
                                 std::to_string(inst.question_id));
      vectors.push_back(it->second);
    }
    auto p = metrics::ensemble_predict(vectors);
    preds[inst.question_id] = p.answer;
    fused[inst.question_id] = std::move(p.scores);
  }
  const fs::path dir = output_dir;
  fs::create_directories(dir);
  write_text(dir / "scores.vqas", metrics::serialize_scores(fused));
  out << "fused " << tables.size() << " score files; ";
  write_reports(dir, preds, in, out);
  return kExitOk;
}

struct AblationCell {
  std::vector<std::string> values;
  std::vector<double> scores;
};

int cmd_ablate(const std::vector<std::string> &base_args, const std::vector<std::string> &axes,
               std::size_t repeats, const std::string &output, std::ostream &out) {
  std::vector<std::string> keys;
  std::vector<std::vector<std::string>> levels;
  for (const auto &axis : axes) {
    const auto eq = axis.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == axis.size())
      throw UsageError("axis '" + axis + "' is not of the form key=v1,v2,...");
    keys.push_back(axis.substr(0, eq));
    levels.emplace_back();
    std::stringstream ss(axis.substr(eq + 1));
    for (std::string v; std::getline(ss, v, ',');)
      levels.back().push_back(trim(v));
  }

  auto parse_cell = [&](const std::vector<std::string> &values) {
    Experiment ex;
    CLI::App app;
    ex.bind(&app, false);
    std::vector<std::string> args = base_args;
    for (std::size_t i = 0; i < keys.size(); ++i)
      args.push_back("--" + keys[i] + "=" + values[i]);
    std::reverse(args.begin(), args.end());
    try {
      app.parse(args);
    } catch (const CLI::ParseError &e) {
      throw UsageError(std::string("ablation cell: ") + e.what());
    }
    ex.validate();
    return ex;
  };

  // Cartesian product of the axis levels, first axis varying slowest.
  std::vector<AblationCell> cells(1);
  for (const auto &lv : levels) {
    std::vector<AblationCell> next;
    for (const auto &c : cells)
      for (const auto &v : lv) {
        auto n = c;
        n.values.push_back(v);
        next.push_back(std::move(n));
      }
    cells = std::move(next);
  }
  std::vector<Experiment> experiments;
  for (const auto &c : cells)
    experiments.push_back(parse_cell(c.values)); // every cell validated before any training

  std::optional<LoadedData> shared;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    auto ex = experiments[i];
    const bool data_axis = std::any_of(keys.begin(), keys.end(), [](const std::string &k) {
      return k == "threshold" || k == "max_question_len" || k == "embed_dim" ||
             k == "feature_dim" || k == "max_regions";
    });
    if (!shared || data_axis)
      shared = load_data(ex);
    const auto base_seed = ex.train.seed;
    for (std::size_t r = 0; r < repeats; ++r) {
      ex.train.seed = base_seed + r;
      std::optional<fs::path> dir;
      if (!ex.output_dir.empty())
        dir = fs::path(ex.output_dir) /
              ("cell" + std::to_string(i + 1) + "_run" + std::to_string(r + 1));
      const auto outcome = train_once(ex, *shared, dir);
      if (!outcome.best_score)
        throw std::runtime_error("ablation needs validation questions to score each run");
      cells[i].scores.push_back(*outcome.best_score);
    }
    out << "cell " << (i + 1) << "/" << cells.size() << " done\n";
  }

  std::ostringstream csv;
  csv.precision(10);
  for (const auto &k : keys)
    csv << k << ",";
  csv << "runs,mean,std\n";
  for (const auto &c : cells) {
    const double n = static_cast<double>(c.scores.size());
    const double mean = std::accumulate(c.scores.begin(), c.scores.end(), 0.0) / n;
    double ss = 0.0;
    for (double s : c.scores)
      ss += (s - mean) * (s - mean);
    const double sd = c.scores.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    for (const auto &v : c.values)
      csv << v << ",";
    csv << c.scores.size() << "," << mean << "," << sd << "\n";
  }
  const fs::path path = output;
  if (path.has_parent_path())
    fs::create_directories(path.parent_path());
  write_text(path, csv.str());
  out << "wrote " << cells.size() << " rows to " << output << "\n";
  return kExitOk;
}

struct GradCheckOptions {
  std::size_t vocab_size = 10;
  std::size_t num_answers = 4;
  std::size_t regions = 3;
  double eps = 1e-4;
  double tolerance = 1e-3;
};

int cmd_gradcheck(const ModelOptions &mo, const GradCheckOptions &go, std::uint64_t seed,
                  std::ostream &out) {
  auto cfg = mo.to_config(go.vocab_size, go.num_answers);
  model::VqaModel m(cfg, seed);
  Rng rng(seed + 1);
  Tensor features({go.regions, cfg.feature_dim});
  for (auto &v : features.data())
    v = rng.uniform(-1.0, 1.0);
  std::vector<int> ids(cfg.max_question_len, model::kPadToken);
  for (std::size_t i = 0; i < std::min<std::size_t>(4, ids.size()); ++i)
    ids[i] = 2 + static_cast<int>(rng.below(go.vocab_size - 2));
  data::Targets targets = {{0, 1.0}};
  if (go.num_answers > 1)
    targets[go.num_answers - 1] = 0.3;
  const auto loss = train::loss_for(cfg.output_head);
  const auto result = ad::grad_check(
      [&](ad::Graph &g) {
        auto scores = m.forward(g, ids, features).scores;
        return loss == train::Loss::soft_bce ? train::loss_soft_bce(scores, targets)
                                             : train::loss_softmax_ce(scores, 0);
      },
      go.eps);
  const bool ok = result.max_relative_error < go.tolerance;
  out << nlohmann::json{{"max_relative_error", result.max_relative_error},
                        {"worst_parameter", result.worst_parameter},
                        {"worst_index", result.worst_index},
                        {"entries_checked", result.entries_checked},
                        {"tolerance", go.tolerance},
                        {"passed", ok}}
             .dump()
      << "\n";
  return ok ? kExitOk : kExitRuntime;
}

// Argument handling --------------------------------------------------------------

/// Splices `--key=value` arguments from a `--config` file in front of the
/// command-line flags, so flags given explicitly win.
std::vector<std::string> expand_config(const std::vector<std::string> &args, CLI::App &app) {
  if (args.empty() || args[0].starts_with("-"))
    return args;
  CLI::App *sub = nullptr;
  try {
    sub = app.get_subcommand(args[0]);
  } catch (const CLI::OptionNotFound &) {
    throw UsageError("unknown command '" + args[0] + "'; run 'vqa --help' for the list");
  }
  std::optional<std::string> config_path;
  std::vector<std::string> rest;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 == args.size())
        throw UsageError("--config needs a file name");
      config_path = args[++i];
    } else if (args[i].starts_with("--config=")) {
      config_path = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  std::vector<std::string> out = {args[0]};
  if (config_path) {
    std::string text;
    try {
      text = io::read_file(*config_path);
    } catch (const std::exception &e) {
      throw UsageError(e.what());
    }
    std::vector<std::pair<std::string, std::string>> entries;
    try {
      entries = parse_config_file(text);
    } catch (const std::invalid_argument &e) {
      throw UsageError(*config_path + ": " + e.what());
    }
    for (const auto &[key, value] : entries) {
      if (key == "config" || sub->get_option_no_throw("--" + key) == nullptr)
        throw UsageError(*config_path + ": unknown key '" + key + "' for '" + args[0] + "'");
      if (!value.empty()) // an empty value leaves the option unset
        out.push_back("--" + key + "=" + value);
    }
  }
  out.insert(out.end(), rest.begin(), rest.end());
  return out;
}

std::string effective_config(const CLI::App *sub) {
  std::string text;
  std::istringstream lines(sub->config_to_str(true, false));
  for (std::string line; std::getline(lines, line);)
    if (!line.starts_with("config="))
      text += line + "\n";
  return text;
}

} // namespace

std::vector<std::pair<std::string, std::string>> parse_config_file(const std::string &text) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::istringstream in(text);
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos)
      line.erase(hash);
    const auto body = trim(line);
    if (body.empty())
      continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("line " + std::to_string(line_no) + ": expected key = value");
    const auto key = trim(std::string_view(body).substr(0, eq));
    auto value = trim(std::string_view(body).substr(eq + 1));
    if (key.empty())
      throw std::invalid_argument("line " + std::to_string(line_no) + ": empty key");
    if (value.size() >= 2 && (value.front() == '"' || value.front() == '\'') &&
        value.back() == value.front())
      value = value.substr(1, value.size() - 2);
    for (const auto &e : entries)
      if (e.first == key)
        throw std::invalid_argument("line " + std::to_string(line_no) + ": key '" + key +
                                    "' given twice");
    entries.emplace_back(key, value);
  }
  return entries;
}

int run(const std::vector<std::string> &args, std::ostream &out, std::ostream &err) {
  CLI::App app("Bottom-up top-down attention VQA: training and evaluation driver", "vqa");
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  auto add_config_option = [](CLI::App *sub) {
    sub->add_option("--config", "Flat key = value file; flags override its entries");
  };

  // build-vocab
  std::string bv_questions, bv_output;
  std::int64_t bv_threshold = 8;
  auto *build_vocab = app.add_subcommand("build-vocab", "Build the answer vocabulary");
  scalar(build_vocab, "questions", bv_questions, "Training questions (JSON Lines)")->required();
  scalar(build_vocab, "threshold", bv_threshold, "Keep answers given more than this many times");
  scalar(build_vocab, "output", bv_output, "Answer list to write")->required();
  add_config_option(build_vocab);

  // synth
  synth::SynthSpec spec;
  std::string synth_dir;
  auto *synth_cmd = app.add_subcommand("synth", "Generate the synthetic attention task");
  scalar(synth_cmd, "num_train", spec.num_train, "Training questions");
  scalar(synth_cmd, "num_val", spec.num_val, "Validation questions");
  scalar(synth_cmd, "regions_per_image", spec.regions_per_image, "Regions per image");
  scalar(synth_cmd, "region_types", spec.region_types, "Distinct object types");
  scalar(synth_cmd, "feature_dim", spec.feature_dim, "Region feature width");
  scalar(synth_cmd, "embed_dim", spec.embed_dim, "Word embedding width");
  scalar(synth_cmd, "pair_fraction", spec.pair_fraction, "Share of questions in pairs");
  scalar(synth_cmd, "multi_answer_fraction", spec.multi_answer_fraction,
         "Share of questions with two answers");
  scalar(synth_cmd, "material_fraction", spec.material_fraction,
         "Share of single-answer questions about materials");
  scalar(synth_cmd, "feature_noise", spec.feature_noise, "Gaussian noise on features");
  scalar(synth_cmd, "tones", spec.tones, "Tone variants per color answer (0 to 4)");
  scalar(synth_cmd, "seed", spec.seed, "Generator seed");
  scalar(synth_cmd, "output_dir", synth_dir, "Directory to write")->required();
  add_config_option(synth_cmd);

  // train
  Experiment train_ex;
  auto *train_cmd = app.add_subcommand("train", "Train one model");
  train_ex.bind(train_cmd);
  add_config_option(train_cmd);

  // eval
  std::string ev_checkpoint, ev_questions, ev_features, ev_dir;
  std::size_t ev_max_regions = 100;
  auto *eval_cmd = app.add_subcommand("eval", "Score a checkpoint on a question set");
  scalar(eval_cmd, "checkpoint", ev_checkpoint, "Checkpoint written by train")->required();
  scalar(eval_cmd, "questions", ev_questions, "Questions with answers (JSON Lines)")->required();
  scalar(eval_cmd, "features", ev_features, "Region feature file")->required();
  scalar(eval_cmd, "max_regions", ev_max_regions, "Upper bound on regions per image");
  scalar(eval_cmd, "output_dir", ev_dir, "Directory for reports")->required();
  add_config_option(eval_cmd);

  // ensemble
  std::vector<std::string> en_scores;
  std::string en_checkpoint, en_questions, en_dir;
  auto *ensemble_cmd = app.add_subcommand("ensemble", "Sum stored scores of several models");
  ensemble_cmd->add_option("--scores", en_scores, "Score files written by eval")->required();
  scalar(ensemble_cmd, "checkpoint", en_checkpoint, "Any member checkpoint (for vocabularies)")
      ->required();
  scalar(ensemble_cmd, "questions", en_questions, "Questions with answers")->required();
  scalar(ensemble_cmd, "output_dir", en_dir, "Directory for reports")->required();
  add_config_option(ensemble_cmd);

  // ablate
  Experiment ablate_ex;
  std::vector<std::string> ab_axes;
  std::size_t ab_repeats = 3;
  std::string ab_output;
  auto *ablate_cmd = app.add_subcommand("ablate", "Grid of training runs, mean and std per cell");
  ablate_ex.bind(ablate_cmd, false);
  ablate_cmd->add_option("--axis", ab_axes, "key=v1,v2,... (repeatable)")->required();
  scalar(ablate_cmd, "repeats", ab_repeats, "Seeds per cell");
  scalar(ablate_cmd, "output", ab_output, "CSV file to write")->required();
  add_config_option(ablate_cmd);

  // gradcheck
  ModelOptions gc_model;
  gc_model.hidden_dim = 6;
  gc_model.embed_dim = 5;
  gc_model.feature_dim = 7;
  GradCheckOptions gc;
  std::uint64_t gc_seed = 0;
  auto *gradcheck_cmd = app.add_subcommand("gradcheck", "Finite-difference check of the model");
  gc_model.bind(gradcheck_cmd);
  scalar(gradcheck_cmd, "vocab_size", gc.vocab_size, "Question vocabulary size");
  scalar(gradcheck_cmd, "num_answers", gc.num_answers, "Output vocabulary size");
  scalar(gradcheck_cmd, "regions", gc.regions, "Regions in the test image");
  scalar(gradcheck_cmd, "eps", gc.eps, "Central-difference step");
  scalar(gradcheck_cmd, "tolerance", gc.tolerance, "Largest accepted relative error");
  scalar(gradcheck_cmd, "seed", gc_seed, "Seed for parameters and inputs");
  add_config_option(gradcheck_cmd);

  // Parse and validate: everything up to here is a usage error.
  std::vector<std::string> expanded;
  try {
    expanded = expand_config(args, app);
    std::vector<std::string> reversed(expanded.rbegin(), expanded.rend());
    app.parse(reversed);
    if (train_cmd->parsed())
      train_ex.validate();
    if (ablate_cmd->parsed()) {
      ablate_ex.validate();
      if (ab_repeats == 0)
        throw std::invalid_argument("repeats must be positive");
    }
    if (build_vocab->parsed() && bv_threshold < 0)
      throw std::invalid_argument("threshold must be non-negative");
    if (synth_cmd->parsed())
      spec.validate();
    if (gradcheck_cmd->parsed()) {
      gc_model.to_config(gc.vocab_size, gc.num_answers);
      if (gc.vocab_size < 3 || gc.regions == 0)
        throw std::invalid_argument("gradcheck needs vocab_size >= 3 and regions >= 1");
    }
  } catch (const CLI::CallForHelp &) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp &) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError &e) {
    err << "vqa: " << e.what() << "\n";
    if (app.get_subcommands().empty())
      err << "run 'vqa --help' for the list of commands\n";
    return kExitUsage;
  } catch (const UsageError &e) {
    err << "vqa: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception &e) {
    err << "vqa: configuration error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (build_vocab->parsed())
      return cmd_build_vocab(bv_questions, bv_threshold, bv_output, out);
    if (synth_cmd->parsed())
      return cmd_synth(spec, synth_dir, effective_config(synth_cmd), out);
    if (train_cmd->parsed())
      return cmd_train(train_ex, effective_config(train_cmd), out);
    if (eval_cmd->parsed())
      return cmd_eval(ev_checkpoint, ev_questions, ev_features, ev_max_regions, ev_dir, out);
    if (ensemble_cmd->parsed())
      return cmd_ensemble(en_scores, en_checkpoint, en_questions, en_dir, out);
    if (ablate_cmd->parsed()) {
      std::vector<std::string> base;
      for (const auto &[key, value] : parse_config_file(effective_config(ablate_cmd)))
        if (!value.empty() && key != "axis" && key != "repeats" && key != "output")
          base.push_back("--" + key + "=" + value);
      return cmd_ablate(base, ab_axes, ab_repeats, ab_output, out);
    }
    if (gradcheck_cmd->parsed())
      return cmd_gradcheck(gc_model, gc, gc_seed, out);
  } catch (const UsageError &e) {
    err << "vqa: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception &e) {
    err << "vqa: error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

} // namespace vqa::cli
