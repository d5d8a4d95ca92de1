// SPDX-License-Identifier: Apache-2.0
#include "vqa/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>

#include "vqa/binary_io.hpp"
#include "vqa/metrics.hpp"
#include "vqa/rng.hpp"

namespace vqa::train {

using vqa::to_string;

std::string_view to_string(TargetMode m) {
  switch (m) {
  case TargetMode::soft:
    return "soft";
  case TargetMode::binary_gt0:
    return "binary_gt0";
  case TargetMode::binary_eq1:
    return "binary_eq1";
  }
  return "?";
}

std::string_view to_string(ShuffleMode m) {
  return m == ShuffleMode::balanced_pairs ? "balanced_pairs" : "random";
}

std::string_view to_string(Loss l) { return l == Loss::soft_bce ? "soft_bce" : "softmax_ce"; }

TargetMode parse_target_mode(std::string_view s) {
  for (auto m : {TargetMode::soft, TargetMode::binary_gt0, TargetMode::binary_eq1})
    if (s == to_string(m))
      return m;
  throw std::invalid_argument("unknown target mode '" + std::string(s) + "'");
}

ShuffleMode parse_shuffle_mode(std::string_view s) {
  for (auto m : {ShuffleMode::balanced_pairs, ShuffleMode::random})
    if (s == to_string(m))
      return m;
  throw std::invalid_argument("unknown shuffle mode '" + std::string(s) + "'");
}

Loss parse_loss(std::string_view s) {
  for (auto l : {Loss::soft_bce, Loss::softmax_ce})
    if (s == to_string(l))
      return l;
  throw std::invalid_argument("unknown loss '" + std::string(s) + "'");
}

Loss loss_for(model::OutputHead head) {
  return head == model::OutputHead::softmax ? Loss::softmax_ce : Loss::soft_bce;
}

void require_pairing(model::OutputHead head, Loss loss) {
  if (loss != loss_for(head))
    throw std::invalid_argument("loss " + std::string(to_string(loss)) +
                                " cannot train the " + std::string(model::to_string(head)) +
                                " output head");
}

// Losses -------------------------------------------------------------------------

ad::Var loss_soft_bce(ad::Var scores, const data::Targets &targets) {
  const Tensor &p = scores.value();
  if (p.rank() != 1)
    throw ShapeError("loss_soft_bce: scores must be a vector, got " + to_string(p.shape()));
  const auto n = p.size();
  Tensor s({n});
  for (const auto &[j, v] : targets) {
    if (j >= n)
      throw std::out_of_range("target answer " + std::to_string(j) + " outside " +
                              std::to_string(n) + " scores");
    s[j] = v;
  }
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    if (s[j] != 0.0)
      total -= s[j] * std::log(std::max(p[j], kScoreClamp));
    if (s[j] != 1.0)
      total -= (1.0 - s[j]) * std::log(std::max(1.0 - p[j], kScoreClamp));
  }
  return scores.graph().record(
      Tensor::vector({total}), {scores}, [s = std::move(s)](const ad::BackwardContext &c) {
        auto *g = c.in_grads[0];
        if (!g)
          return;
        const Tensor &p = *c.in_values[0];
        const double up = c.out_grad[0];
        for (std::size_t j = 0; j < p.size(); ++j) {
          double d = 0.0;
          if (s[j] != 0.0 && p[j] > kScoreClamp)
            d -= s[j] / p[j];
          if (s[j] != 1.0 && 1.0 - p[j] > kScoreClamp)
            d += (1.0 - s[j]) / (1.0 - p[j]);
          (*g)[j] += up * d;
        }
      });
}

ad::Var loss_softmax_ce(ad::Var scores, std::size_t target) {
  const Tensor &p = scores.value();
  if (p.rank() != 1)
    throw ShapeError("loss_softmax_ce: scores must be a vector, got " + to_string(p.shape()));
  if (target >= p.size())
    throw std::out_of_range("softmax target " + std::to_string(target) + " outside " +
                            std::to_string(p.size()) + " scores");
  const double value = -std::log(std::max(p[target], kScoreClamp));
  return scores.graph().record(Tensor::vector({value}), {scores},
                               [target](const ad::BackwardContext &c) {
                                 auto *g = c.in_grads[0];
                                 const double pt = (*c.in_values[0])[target];
                                 if (g && pt > kScoreClamp)
                                   (*g)[target] -= c.out_grad[0] / pt;
                               });
}

std::optional<std::size_t> single_target(const data::Targets &targets) {
  std::optional<std::size_t> best;
  double best_score = 0.0;
  for (const auto &[j, s] : targets) // ascending index, so ties keep the lowest
    if (s > best_score) {
      best = j;
      best_score = s;
    }
  return best;
}

data::Targets binarize_targets(const data::Targets &targets, TargetMode mode) {
  if (mode == TargetMode::soft)
    return targets;
  data::Targets out;
  for (const auto &[j, s] : targets)
    if ((mode == TargetMode::binary_gt0 && s > 0.0) ||
        (mode == TargetMode::binary_eq1 && s == 1.0))
      out[j] = 1.0;
  return out;
}

// AdaDelta -------------------------------------------------------------------------

AdaDelta::AdaDelta(double rho, double epsilon) : rho_(rho), epsilon_(epsilon) {
  if (!(rho > 0.0 && rho < 1.0))
    throw std::invalid_argument("AdaDelta rho must lie in (0, 1)");
  if (!(epsilon > 0.0))
    throw std::invalid_argument("AdaDelta epsilon must be positive");
}

void AdaDelta::step(std::span<Parameter *const> params) {
  for (auto *p : params) {
    require_same_shape(p->value, p->gradient, ("gradient of " + p->name).c_str());
    auto [it, inserted] = states_.try_emplace(p);
    auto &st = it->second;
    if (inserted) {
      st.accum_grad_sq = Tensor(p->value.shape());
      st.accum_update_sq = Tensor(p->value.shape());
    }
    require_same_shape(p->value, st.accum_grad_sq, ("optimizer state of " + p->name).c_str());
    const auto width = p->row_width();
    for (std::size_t r = 0; r < p->row_count(); ++r) {
      if (!p->row_trainable(r))
        continue;
      for (std::size_t i = r * width; i < (r + 1) * width; ++i) {
        const double g = p->lr_scale * p->gradient[i];
        double &eg = st.accum_grad_sq[i];
        double &ed = st.accum_update_sq[i];
        eg = rho_ * eg + (1.0 - rho_) * g * g;
        const double delta = -std::sqrt(ed + epsilon_) / std::sqrt(eg + epsilon_) * g;
        ed = rho_ * ed + (1.0 - rho_) * delta * delta;
        p->value[i] += delta;
      }
    }
  }
}

const AdaDelta::State &AdaDelta::state(const Parameter &p) const {
  auto it = states_.find(&p);
  if (it == states_.end())
    throw std::out_of_range("no optimizer state for parameter '" + p.name + "'");
  return it->second;
}

// Configuration and logs -------------------------------------------------------------

void TrainConfig::validate() const {
  if (batch_size == 0)
    throw std::invalid_argument("batch_size must be positive");
  if (!(rho > 0.0 && rho < 1.0))
    throw std::invalid_argument("rho must lie in (0, 1)");
  if (!(epsilon > 0.0))
    throw std::invalid_argument("epsilon must be positive");
  if (patience && *patience == 0)
    throw std::invalid_argument("patience must be positive when set");
}

bool TrainConfig::reference_batch_size() const {
  for (std::size_t b : {128, 256, 384, 512, 768})
    if (batch_size == b)
      return true;
  return false;
}

nlohmann::json EpochRecord::to_json() const {
  nlohmann::json j = {{"epoch", epoch}, {"train_loss", train_loss}};
  j["val_score"] = val_score ? nlohmann::json(*val_score) : nlohmann::json(nullptr);
  return j;
}

std::string TrainLog::to_jsonl() const {
  std::string out;
  for (const auto &e : epochs)
    out += e.to_json().dump() + "\n";
  nlohmann::json summary = {{"best_epoch", nullptr}};
  if (best_epoch)
    summary["best_epoch"] = *best_epoch;
  out += summary.dump() + "\n";
  return out;
}

std::string TrainLog::timing_jsonl() const {
  std::string out;
  for (const auto &e : epochs)
    out += nlohmann::json{{"epoch", e.epoch}, {"wall_seconds", e.wall_seconds}}.dump() + "\n";
  return out;
}

// Training -------------------------------------------------------------------------------

std::vector<std::size_t> epoch_order(std::span<const data::QAInstance> instances,
                                     std::size_t batch_size, ShuffleMode mode,
                                     std::uint64_t seed) {
  if (mode == ShuffleMode::random)
    return Rng(seed).permutation(instances.size());
  std::vector<std::optional<std::int64_t>> pair_ids;
  pair_ids.reserve(instances.size());
  for (const auto &inst : instances)
    pair_ids.push_back(inst.pair_id);
  return data::balanced_pair_shuffle(pair_ids, batch_size, seed);
}

ad::Var batch_loss(ad::Graph &g, model::VqaModel &model,
                   std::span<const data::QAInstance *const> batch,
                   const data::FeatureStore &features, TargetMode mode, Loss loss) {
  std::optional<ad::Var> total;
  for (const auto *inst : batch) {
    auto it = features.find(inst->image_id);
    if (it == features.end())
      throw std::out_of_range("no features for image " + std::to_string(inst->image_id) +
                              " (question " + std::to_string(inst->question_id) + ")");
    std::optional<ad::Var> term;
    if (loss == Loss::softmax_ce) {
      // The softmax head can express one answer only; questions without an
      // in-vocabulary answer contribute nothing.
      auto target = single_target(inst->targets);
      if (!target)
        continue;
      term = loss_softmax_ce(model.forward(g, inst->token_ids, it->second).scores, *target);
    } else {
      term = loss_soft_bce(model.forward(g, inst->token_ids, it->second).scores,
                           binarize_targets(inst->targets, mode));
    }
    total = total ? ad::add(*total, *term) : *term;
  }
  if (!total)
    return g.constant(Tensor::vector({0.0}));
  return ad::scale(*total, 1.0 / static_cast<double>(batch.size()));
}

namespace {

double validation_score(model::VqaModel &model, std::span<const data::QAInstance> val,
                        const data::FeatureStore &features) {
  const auto scores = metrics::score_all(model, val, features);
  return metrics::vqa_accuracy(metrics::predict_all(scores), metrics::ground_truth(val));
}

std::string checkpoint_name(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%03zu.vqac", epoch);
  return buf;
}

} // namespace

TrainResult train(model::VqaModel &model, const TrainData &data, const TrainConfig &config,
                  const std::optional<std::filesystem::path> &output_dir) {
  config.validate();
  const Loss loss = config.loss.value_or(loss_for(model.config().output_head));
  require_pairing(model.config().output_head, loss);
  if (data.train.empty())
    throw std::invalid_argument("training set is empty");

  AdaDelta optimizer(config.rho, config.epsilon);
  Rng epoch_seeds(config.seed);
  auto params = model.parameters();
  TrainResult result;
  std::optional<double> best_score;
  std::size_t since_best = 0;

  auto save = [&](std::size_t epoch) {
    return model::save_checkpoint(model, {{"epoch", epoch}, {"seed", config.seed}});
  };
  result.best_checkpoint = save(0);

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    const auto order =
        epoch_order(data.train, config.batch_size, config.shuffle_mode, epoch_seeds.next());

    double loss_sum = 0.0;
    std::vector<const data::QAInstance *> batch;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      batch.clear();
      for (std::size_t k = start; k < std::min(order.size(), start + config.batch_size); ++k)
        batch.push_back(&data.train[order[k]]);
      ad::Graph g;
      auto l = batch_loss(g, model, batch, data.features, config.target_mode, loss);
      const double value = l.value()[0];
      if (!std::isfinite(value))
        throw TrainingDiverged("training loss became " + std::to_string(value) + " in epoch " +
                               std::to_string(epoch) + ", batch starting at position " +
                               std::to_string(start) + " (first question " +
                               std::to_string(batch.front()->question_id) + ")");
      loss_sum += value * static_cast<double>(batch.size());
      if (g.parameters().empty())
        continue;
      for (auto *p : params)
        p->zero_grad();
      g.backward(l);
      optimizer.step(params);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    if (!data.val.empty())
      rec.val_score = validation_score(model, data.val, data.features);
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.log.epochs.push_back(rec);

    const bool improved = rec.val_score && (!best_score || *rec.val_score > *best_score);
    const auto bytes = save(epoch);
    if (improved) {
      best_score = rec.val_score;
      result.log.best_epoch = epoch;
      result.best_checkpoint = bytes;
      since_best = 0;
    } else {
      ++since_best;
    }
    if (data.val.empty())
      result.best_checkpoint = bytes;

    if (output_dir) {
      io::write_file(*output_dir / checkpoint_name(epoch), bytes);
      io::write_file(*output_dir / "train_log.jsonl", result.log.to_jsonl());
      io::write_file(*output_dir / "timing.jsonl", result.log.timing_jsonl());
    }

    if (config.stop_at_score && rec.val_score && *rec.val_score >= *config.stop_at_score) {
      result.log.epochs_to_target = epoch;
      break;
    }
    if (config.patience && since_best >= *config.patience)
      break;
  }
  if (output_dir) {
    io::write_file(*output_dir / "train_log.jsonl", result.log.to_jsonl());
    io::write_file(*output_dir / "timing.jsonl", result.log.timing_jsonl());
  }
  return result;
}

model::VqaModel retrain_with_val(const TrainLog &log,
                                 const std::function<model::VqaModel()> &make_model,
                                 std::span<const data::QAInstance> train_set,
                                 std::span<const data::QAInstance> val_set,
                                 const data::FeatureStore &features, TrainConfig config) {
  if (!log.best_epoch)
    throw std::invalid_argument("retrain_with_val: the training log has no best epoch");
  auto model = make_model();
  if (*log.best_epoch == 0)
    return model;
  std::vector<data::QAInstance> all(train_set.begin(), train_set.end());
  all.insert(all.end(), val_set.begin(), val_set.end());
  config.max_epochs = *log.best_epoch;
  config.patience.reset();
  config.stop_at_score.reset();
  train(model, TrainData{all, {}, features}, config);
  return model;
}

} // namespace vqa::train
