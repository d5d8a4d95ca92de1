// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "vqa/data.hpp"
#include "vqa/model.hpp"

namespace vqa::train {

enum class TargetMode { soft, binary_gt0, binary_eq1 };
enum class ShuffleMode { balanced_pairs, random };
enum class Loss { soft_bce, softmax_ce };

std::string_view to_string(TargetMode m);
std::string_view to_string(ShuffleMode m);
std::string_view to_string(Loss l);
TargetMode parse_target_mode(std::string_view s);
ShuffleMode parse_shuffle_mode(std::string_view s);
Loss parse_loss(std::string_view s);

/// The loss that matches an output head: soft BCE for sigmoid heads,
/// cross-entropy for softmax.
Loss loss_for(model::OutputHead head);
/// Throws std::invalid_argument when `loss` cannot be used with `head`.
void require_pairing(model::OutputHead head, Loss loss);

// Losses and targets -----------------------------------------------------------

inline constexpr double kScoreClamp = 1e-9;

/**
 * Binary cross-entropy against dense soft targets (absent entries are 0),
 * summed over answers:
 *   -Σ_j [ s_j log max(ŝ_j, 1e-9) + (1 - s_j) log max(1 - ŝ_j, 1e-9) ]
 * Returns a [1] node.
 */
ad::Var loss_soft_bce(ad::Var scores, const data::Targets &targets);

/// -log max(scores[target], 1e-9) as a [1] node; std::out_of_range when the
/// target is not an index of `scores`.
ad::Var loss_softmax_ce(ad::Var scores, std::size_t target);

/// Answer with the highest target score (lowest index on ties); nullopt when
/// the question has no in-vocabulary answer.
std::optional<std::size_t> single_target(const data::Targets &targets);

/// binary_gt0: 1 wherever s > 0. binary_eq1: 1 where s == 1, others dropped.
data::Targets binarize_targets(const data::Targets &targets, TargetMode mode);

// Optimizer ----------------------------------------------------------------------

/**
 * AdaDelta with per-parameter learning-rate scales. For each element, with
 * g = lr_scale * gradient:
 *   E[g²] <- ρ E[g²] + (1 - ρ) g²
 *   Δ     =  -sqrt(E[Δ²] + ε) / sqrt(E[g²] + ε) * g
 *   E[Δ²] <- ρ E[Δ²] + (1 - ρ) Δ²
 *   value <- value + Δ
 * Rows masked by the parameter are left untouched.
 */
class AdaDelta {
public:
  struct State {
    Tensor accum_grad_sq;
    Tensor accum_update_sq;
  };

  explicit AdaDelta(double rho = 0.95, double epsilon = 1e-6);

  void step(std::span<Parameter *const> params);
  /// Throws std::out_of_range for a parameter that has never been stepped.
  const State &state(const Parameter &p) const;

  double rho() const noexcept { return rho_; }
  double epsilon() const noexcept { return epsilon_; }

private:
  double rho_;
  double epsilon_;
  std::unordered_map<const Parameter *, State> states_;
};

// Training loop ------------------------------------------------------------------

struct TrainConfig {
  std::size_t batch_size = 512;
  std::size_t max_epochs = 20;
  std::uint64_t seed = 0;
  TargetMode target_mode = TargetMode::soft;
  ShuffleMode shuffle_mode = ShuffleMode::balanced_pairs;
  /// Defaults to loss_for(head).
  std::optional<Loss> loss;
  double rho = 0.95;
  double epsilon = 1e-6;
  /// Stop after this many epochs without a new best validation score.
  std::optional<std::size_t> patience;
  /// Stop as soon as the validation score reaches this value.
  std::optional<double> stop_at_score;

  /// Throws std::invalid_argument.
  void validate() const;
  /// The batch sizes of the reference setup (128, 256, 384, 512, 768).
  bool reference_batch_size() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;              ///< mean per question
  std::optional<double> val_score;      ///< VQA score on the validation split
  double wall_seconds = 0.0;            ///< not part of the JSON form

  nlohmann::json to_json() const;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::optional<std::size_t> best_epoch; ///< highest validation score, first on ties
  /// First epoch whose validation score reached stop_at_score, if any.
  std::optional<std::size_t> epochs_to_target;

  /// One JSON object per epoch line, then {"best_epoch": ...}. Excludes wall time.
  std::string to_jsonl() const;
  /// Wall time per epoch, one JSON object per line.
  std::string timing_jsonl() const;
};

struct TrainResult {
  TrainLog log;
  /// Checkpoint bytes of the best validation epoch (or the last epoch when
  /// there is no validation split).
  std::string best_checkpoint;
};

/// Loss of a sigmoid or softmax model diverged.
class TrainingDiverged : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct TrainData {
  std::span<const data::QAInstance> train;
  std::span<const data::QAInstance> val;
  const data::FeatureStore &features;
};

/// Writes epoch_NNN.vqac checkpoints and train_log.jsonl / timing.jsonl
/// into `output_dir` when it is set.
TrainResult train(model::VqaModel &model, const TrainData &data, const TrainConfig &config,
                  const std::optional<std::filesystem::path> &output_dir = std::nullopt);

/// Mean loss over the instances of one mini-batch, as a [1] node.
ad::Var batch_loss(ad::Graph &g, model::VqaModel &model,
                   std::span<const data::QAInstance *const> batch,
                   const data::FeatureStore &features, TargetMode mode, Loss loss);

/// Epoch order of the training instances for the given shuffle mode.
std::vector<std::size_t> epoch_order(std::span<const data::QAInstance> instances,
                                     std::size_t batch_size, ShuffleMode mode,
                                     std::uint64_t seed);

/**
 * Trains a fresh model from `make_model` for `log.best_epoch` epochs on the
 * union of the train and validation instances. Throws std::invalid_argument
 * when the log has no best epoch.
 */
model::VqaModel retrain_with_val(const TrainLog &log,
                                 const std::function<model::VqaModel()> &make_model,
                                 std::span<const data::QAInstance> train_set,
                                 std::span<const data::QAInstance> val_set,
                                 const data::FeatureStore &features, TrainConfig config);

} // namespace vqa::train
