// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "vqa/binary_io.hpp"
#include "vqa/grad_check.hpp"
#include "vqa/layers.hpp"
#include "vqa/rng.hpp"
#include "vqa/synthetic.hpp"
#include "vqa/training.hpp"

using namespace vqa;
using namespace vqa::train;

namespace {

double eval_bce(const Tensor &scores, const data::Targets &targets) {
  ad::Graph g;
  return loss_soft_bce(g.constant(scores), targets).value()[0];
}

Tensor bce_grad(const Tensor &scores, const data::Targets &targets) {
  Parameter p("s", scores);
  ad::Graph g;
  auto l = loss_soft_bce(g.param(p), targets);
  p.zero_grad();
  g.backward(l);
  return p.gradient;
}

struct SmallTask {
  synth::PreparedTask task;
  model::ModelConfig config;

  explicit SmallTask(std::size_t n_train = 40, std::size_t n_val = 10) {
    synth::SynthSpec spec;
    spec.num_train = n_train;
    spec.num_val = n_val;
    spec.embed_dim = 8;
    spec.seed = 17;
    task = synth::prepare(synth::generate(spec));
    config = task.model_config(8);
  }

  TrainData data() const { return {task.train, task.val, task.features}; }
};

TrainConfig small_config() {
  TrainConfig c;
  c.batch_size = 8;
  c.max_epochs = 3;
  c.seed = 5;
  return c;
}

} // namespace

// Losses ---------------------------------------------------------------------

TEST(SoftBce, UniformScoresAllZeroTargets) {
  EXPECT_NEAR(eval_bce(Tensor({4}, 0.5), {}), 4.0 * std::numbers::ln2, 1e-12);
  EXPECT_NEAR(eval_bce(Tensor({4}, 0.5), {}), 2.7726, 1e-4);
}

TEST(SoftBce, MatchesClosedForm) {
  const Tensor s({3}, {0.2, 0.7, 0.95});
  const data::Targets t = {{0, 0.3}, {2, 1.0}};
  const double expected = -(0.3 * std::log(0.2) + 0.7 * std::log(0.8)) - std::log(0.3) -
                          std::log(0.95);
  EXPECT_NEAR(eval_bce(s, t), expected, 1e-12);
}

TEST(SoftBce, PerfectPredictionIsZero) {
  EXPECT_EQ(eval_bce(Tensor({3}, {1.0, 0.0, 1.0}), {{0, 1.0}, {2, 1.0}}), 0.0);
}

TEST(SoftBce, NonNegative) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor s({5});
    for (auto &v : s.data())
      v = rng.uniform();
    data::Targets t;
    for (std::size_t j = 0; j < 5; ++j)
      if (rng.uniform() < 0.4)
        t[j] = std::round(rng.uniform() * 10.0) / 10.0;
    EXPECT_GE(eval_bce(s, t), 0.0);
  }
}

TEST(SoftBce, EmptyTargetsPushScoresDown) {
  const auto grad = bce_grad(Tensor({4}, {0.1, 0.5, 0.8, 0.99}), {});
  for (double v : grad.data())
    EXPECT_GT(v, 0.0);
}

TEST(SoftBce, GradientPointsTowardTarget) {
  const auto grad = bce_grad(Tensor({2}, {0.2, 0.9}), {{0, 0.6}, {1, 0.6}});
  EXPECT_LT(grad[0], 0.0);
  EXPECT_GT(grad[1], 0.0);
}

TEST(SoftBce, GradCheck) {
  Parameter logits("logits", Tensor({6}, {0.3, -1.2, 2.0, 0.0, -0.4, 0.9}));
  const data::Targets t = {{0, 1.0}, {2, 0.3}, {4, 0.6}};
  const auto r = ad::grad_check([&](ad::Graph &g) {
    return loss_soft_bce(ad::sigmoid(g.param(logits)), t);
  });
  EXPECT_LT(r.max_relative_error, 1e-4);
}

TEST(SoftmaxCe, UniformIsLogN) {
  ad::Graph g;
  EXPECT_NEAR(loss_softmax_ce(g.constant(Tensor({5}, 0.2)), 3).value()[0], std::log(5.0), 1e-12);
}

TEST(SoftmaxCe, CertainTargetIsZero) {
  ad::Graph g;
  EXPECT_EQ(loss_softmax_ce(g.constant(Tensor({3}, {0.0, 1.0, 0.0})), 1).value()[0], 0.0);
}

TEST(SoftmaxCe, BadTargetThrows) {
  ad::Graph g;
  EXPECT_THROW(loss_softmax_ce(g.constant(Tensor({3}, 1.0 / 3.0)), 3), std::out_of_range);
}

TEST(SoftmaxCe, GradCheck) {
  Parameter logits("logits", Tensor({5}, {0.3, -1.2, 2.0, 0.0, -0.4}));
  const auto r = ad::grad_check(
      [&](ad::Graph &g) { return loss_softmax_ce(ad::softmax(g.param(logits)), 2); });
  EXPECT_LT(r.max_relative_error, 1e-4);
}

TEST(SoftmaxCe, UnanswerableQuestionsAreSkipped) {
  SmallTask t;
  t.config.output_head = model::OutputHead::softmax;
  model::VqaModel m(t.config, 1);
  auto with_target = t.task.train[0];
  auto without = t.task.train[1];
  without.targets.clear();
  ad::Graph g1, g2;
  std::vector<const data::QAInstance *> both = {&with_target, &without};
  std::vector<const data::QAInstance *> one = {&with_target};
  const double mixed =
      batch_loss(g1, m, both, t.task.features, TargetMode::soft, Loss::softmax_ce).value()[0];
  const double alone =
      batch_loss(g2, m, one, t.task.features, TargetMode::soft, Loss::softmax_ce).value()[0];
  EXPECT_NEAR(mixed, alone / 2.0, 1e-12);
}

TEST(SingleTarget, HighestScoreLowestIndex) {
  EXPECT_EQ(single_target({{3, 0.6}, {1, 1.0}, {2, 1.0}}), 1u);
  EXPECT_EQ(single_target({{4, 0.3}}), 4u);
  EXPECT_FALSE(single_target({}).has_value());
}

TEST(Binarize, Examples) {
  const data::Targets t = {{0, 0.3}, {1, 1.0}};
  EXPECT_EQ(binarize_targets(t, TargetMode::binary_gt0), (data::Targets{{0, 1.0}, {1, 1.0}}));
  EXPECT_EQ(binarize_targets(t, TargetMode::binary_eq1), (data::Targets{{1, 1.0}}));
  EXPECT_EQ(binarize_targets(t, TargetMode::soft), t);
}

TEST(Pairing, HeadAndLossMustAgree) {
  EXPECT_EQ(loss_for(model::OutputHead::sigmoid_decomposed), Loss::soft_bce);
  EXPECT_EQ(loss_for(model::OutputHead::sigmoid_single), Loss::soft_bce);
  EXPECT_EQ(loss_for(model::OutputHead::softmax), Loss::softmax_ce);
  EXPECT_THROW(require_pairing(model::OutputHead::softmax, Loss::soft_bce), std::invalid_argument);
  EXPECT_THROW(require_pairing(model::OutputHead::sigmoid_single, Loss::softmax_ce),
               std::invalid_argument);
  EXPECT_NO_THROW(require_pairing(model::OutputHead::softmax, Loss::softmax_ce));
}

TEST(Enums, RoundTrip) {
  for (auto m : {TargetMode::soft, TargetMode::binary_gt0, TargetMode::binary_eq1})
    EXPECT_EQ(parse_target_mode(to_string(m)), m);
  for (auto m : {ShuffleMode::balanced_pairs, ShuffleMode::random})
    EXPECT_EQ(parse_shuffle_mode(to_string(m)), m);
  for (auto l : {Loss::soft_bce, Loss::softmax_ce})
    EXPECT_EQ(parse_loss(to_string(l)), l);
  EXPECT_THROW(parse_loss("hinge"), std::invalid_argument);
}

// AdaDelta -------------------------------------------------------------------

TEST(AdaDelta, FirstStep) {
  Parameter p("w", Tensor({1}, 0.0));
  p.gradient = Tensor({1}, 1.0);
  AdaDelta opt;
  std::vector<Parameter *> ps = {&p};
  opt.step(ps);
  EXPECT_NEAR(p.value[0], -std::sqrt(1e-6) / std::sqrt(0.05 + 1e-6), 1e-15);
  EXPECT_NEAR(p.value[0], -0.004472, 1e-6);
}

TEST(AdaDelta, MatchesScalarReferenceOverHundredSteps) {
  Rng rng(21);
  Parameter p("w", Tensor({3}, {0.5, -1.0, 2.0}), 0.7);
  AdaDelta opt(0.9, 1e-5);
  std::vector<Parameter *> ps = {&p};
  // Reference recurrence, written independently in plain scalars.
  double x[3] = {0.5, -1.0, 2.0}, eg[3] = {}, ed[3] = {};
  for (int step = 0; step < 100; ++step) {
    p.gradient = Tensor({3});
    for (int i = 0; i < 3; ++i) {
      const double raw = rng.normal() * (i + 1);
      p.gradient[i] = raw;
      const double g = 0.7 * raw;
      eg[i] = 0.9 * eg[i] + 0.1 * g * g;
      const double d = -std::sqrt(ed[i] + 1e-5) / std::sqrt(eg[i] + 1e-5) * g;
      ed[i] = 0.9 * ed[i] + 0.1 * d * d;
      x[i] += d;
    }
    opt.step(ps);
    for (int i = 0; i < 3; ++i) {
      ASSERT_NEAR(p.value[i], x[i], 1e-12) << "step " << step;
      ASSERT_NEAR(opt.state(p).accum_grad_sq[i], eg[i], 1e-12);
      ASSERT_NEAR(opt.state(p).accum_update_sq[i], ed[i], 1e-12);
    }
  }
}

TEST(AdaDelta, ZeroGradientIsNoOp) {
  Parameter p("w", Tensor({2}, {1.0, -3.0}));
  AdaDelta opt;
  std::vector<Parameter *> ps = {&p};
  p.gradient = Tensor({2}, 1.0);
  opt.step(ps);
  const Tensor after_first = p.value;
  const double eg = opt.state(p).accum_grad_sq[0];
  p.gradient = Tensor({2});
  opt.step(ps);
  EXPECT_EQ(p.value, after_first);
  EXPECT_NEAR(opt.state(p).accum_grad_sq[0], 0.95 * eg, 1e-18);
}

TEST(AdaDelta, ZeroScaleFreezes) {
  Parameter p("w", Tensor({3}, {1.0, 2.0, 3.0}), 0.0);
  AdaDelta opt;
  std::vector<Parameter *> ps = {&p};
  for (int i = 0; i < 10; ++i) {
    p.gradient = Tensor({3}, 5.0);
    opt.step(ps);
  }
  EXPECT_EQ(p.value, Tensor({3}, {1.0, 2.0, 3.0}));
}

TEST(AdaDelta, ScaleAppliesToGradient) {
  Parameter scaled("a", Tensor({1}, 0.0), 0.01);
  Parameter manual("b", Tensor({1}, 0.0));
  AdaDelta opt;
  std::vector<Parameter *> ps = {&scaled, &manual};
  Rng rng(4);
  for (int i = 0; i < 20; ++i) {
    const double g = rng.normal();
    scaled.gradient = Tensor({1}, g);
    manual.gradient = Tensor({1}, 0.01 * g);
    opt.step(ps);
    EXPECT_DOUBLE_EQ(scaled.value[0], manual.value[0]);
  }
}

TEST(AdaDelta, MaskedRowsUntouched) {
  Parameter p("table", Tensor::matrix(2, 2, {1.0, 2.0, 3.0, 4.0}));
  p.trainable_rows = std::vector<bool>{false, true};
  p.gradient = Tensor({2, 2}, 1.0);
  AdaDelta opt;
  std::vector<Parameter *> ps = {&p};
  opt.step(ps);
  EXPECT_EQ(p.value.at(0, 0), 1.0);
  EXPECT_EQ(p.value.at(0, 1), 2.0);
  EXPECT_LT(p.value.at(1, 0), 3.0);
  EXPECT_EQ(opt.state(p).accum_grad_sq.at(0, 0), 0.0);
}

TEST(AdaDelta, AccumulatorsStayNonNegative) {
  Parameter p("w", Tensor({4}));
  AdaDelta opt;
  std::vector<Parameter *> ps = {&p};
  Rng rng(2);
  for (int i = 0; i < 50; ++i) {
    p.gradient = Tensor({4});
    for (auto &g : p.gradient.data())
      g = rng.normal();
    opt.step(ps);
    for (std::size_t k = 0; k < 4; ++k) {
      EXPECT_GE(opt.state(p).accum_grad_sq[k], 0.0);
      EXPECT_GE(opt.state(p).accum_update_sq[k], 0.0);
    }
  }
}

TEST(AdaDelta, ShapeMismatchThrows) {
  Parameter p("w", Tensor({3}));
  p.gradient = Tensor({2});
  AdaDelta opt;
  std::vector<Parameter *> ps = {&p};
  EXPECT_THROW(opt.step(ps), ShapeError);
  EXPECT_THROW(opt.state(p), std::out_of_range);
  EXPECT_THROW(AdaDelta(1.0, 1e-6), std::invalid_argument);
}

// Training loop --------------------------------------------------------------

TEST(Train, ConvexProbeLossDecreases) {
  // Logistic regression on linearly separable points, full-batch AdaDelta.
  Rng rng(12);
  std::vector<Tensor> xs;
  std::vector<data::Targets> ts;
  for (int i = 0; i < 60; ++i) {
    Tensor x({4});
    for (auto &v : x.data())
      v = rng.normal();
    const bool positive = x[0] + 0.5 * x[1] - x[3] > 0.0;
    xs.push_back(x);
    ts.push_back(positive ? data::Targets{{0, 1.0}} : data::Targets{});
  }
  Rng init(1);
  nn::LinearLayer layer("probe", 4, 1, true, init);
  std::vector<Parameter *> params;
  layer.collect(params);
  AdaDelta opt;
  double previous = std::numeric_limits<double>::infinity();
  for (int epoch = 0; epoch < 10; ++epoch) {
    ad::Graph g;
    ad::Var total = g.constant(Tensor({1}));
    for (std::size_t i = 0; i < xs.size(); ++i)
      total = total + loss_soft_bce(ad::sigmoid(layer(g, g.constant(xs[i]))), ts[i]);
    auto loss = ad::scale(total, 1.0 / static_cast<double>(xs.size()));
    const double value = loss.value()[0];
    EXPECT_LT(value, previous) << "epoch " << epoch;
    previous = value;
    for (auto *p : params)
      p->zero_grad();
    g.backward(loss);
    opt.step(params);
  }
}

TEST(Train, LogShapeAndBestEpoch) {
  SmallTask t;
  model::VqaModel m(t.config, 3);
  const auto result = train::train(m, t.data(), small_config());
  ASSERT_EQ(result.log.epochs.size(), 3u);
  ASSERT_TRUE(result.log.best_epoch.has_value());
  double best = -1.0;
  for (const auto &e : result.log.epochs) {
    ASSERT_TRUE(e.val_score.has_value());
    EXPECT_TRUE(std::isfinite(e.train_loss));
    best = std::max(best, *e.val_score);
  }
  EXPECT_EQ(*result.log.epochs[*result.log.best_epoch - 1].val_score, best);
  const auto best_model = model::load_checkpoint(result.best_checkpoint);
  EXPECT_EQ(best_model.metadata.at("epoch"), *result.log.best_epoch);
}

TEST(Train, DeterministicGivenSeed) {
  SmallTask t;
  const auto dir = std::filesystem::temp_directory_path() / "vqa_training_test";
  std::filesystem::remove_all(dir);
  std::vector<std::string> logs, last_checkpoints;
  for (int run = 0; run < 2; ++run) {
    const auto out = dir / std::to_string(run);
    std::filesystem::create_directories(out);
    model::VqaModel m(t.config, 3);
    train::train(m, t.data(), small_config(), out);
    logs.push_back(io::read_file(out / "train_log.jsonl"));
    last_checkpoints.push_back(io::read_file(out / "epoch_003.vqac"));
  }
  EXPECT_EQ(logs[0], logs[1]);
  EXPECT_EQ(last_checkpoints[0], last_checkpoints[1]);
  EXPECT_TRUE(std::filesystem::exists(dir / "0" / "timing.jsonl"));
  EXPECT_EQ(logs[0].find("wall"), std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST(Train, DifferentSeedsDiffer) {
  SmallTask t;
  model::VqaModel a(t.config, 3), b(t.config, 3);
  auto ca = small_config(), cb = small_config();
  cb.seed = 6;
  EXPECT_NE(train::train(a, t.data(), ca).best_checkpoint,
            train::train(b, t.data(), cb).best_checkpoint);
}

TEST(Train, StopAtScoreRecordsEpoch) {
  SmallTask t;
  model::VqaModel m(t.config, 3);
  auto c = small_config();
  c.stop_at_score = 0.0;
  const auto result = train::train(m, t.data(), c);
  EXPECT_EQ(result.log.epochs.size(), 1u);
  EXPECT_EQ(result.log.epochs_to_target, 1u);
}

TEST(Train, RejectsEmptyDataAndBadPairing) {
  SmallTask t;
  model::VqaModel m(t.config, 3);
  EXPECT_THROW(train::train(m, TrainData{{}, t.task.val, t.task.features}, small_config()),
               std::invalid_argument);
  auto c = small_config();
  c.loss = Loss::softmax_ce;
  EXPECT_THROW(train::train(m, t.data(), c), std::invalid_argument);
  c = small_config();
  c.batch_size = 0;
  EXPECT_THROW(train::train(m, t.data(), c), std::invalid_argument);
}

TEST(Train, EpochOrderIsPermutation) {
  SmallTask t(60, 0);
  for (auto mode : {ShuffleMode::balanced_pairs, ShuffleMode::random}) {
    auto order = epoch_order(t.task.train, 8, mode, 9);
    std::sort(order.begin(), order.end());
    for (std::size_t i = 0; i < order.size(); ++i)
      EXPECT_EQ(order[i], i);
  }
}

TEST(Train, TrainLogJson) {
  TrainLog log;
  log.epochs.push_back({1, 0.5, 40.0, 1.25});
  log.epochs.push_back({2, 0.25, std::nullopt, 1.5});
  log.best_epoch = 1;
  const auto text = log.to_jsonl();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
  EXPECT_NE(text.find("\"best_epoch\":1"), std::string::npos);
  EXPECT_NE(log.timing_jsonl().find("1.25"), std::string::npos);
}

TEST(RetrainWithVal, ZeroEpochsReturnsInitialization) {
  SmallTask t;
  TrainLog log;
  log.best_epoch = 0;
  auto make = [&] { return model::VqaModel(t.config, 3); };
  auto fresh = make();
  const auto m = retrain_with_val(log, make, t.task.train, t.task.val, t.task.features,
                                  small_config());
  EXPECT_EQ(model::save_checkpoint(m, {}), model::save_checkpoint(fresh, {}));
}

TEST(RetrainWithVal, UnsetBestEpochThrows) {
  SmallTask t;
  auto make = [&] { return model::VqaModel(t.config, 3); };
  EXPECT_THROW(
      retrain_with_val({}, make, t.task.train, t.task.val, t.task.features, small_config()),
      std::invalid_argument);
}

TEST(RetrainWithVal, TrainsOnUnionForBestEpochCount) {
  SmallTask t;
  auto make = [&] { return model::VqaModel(t.config, 3); };
  auto first = make();
  const auto result = train::train(first, t.data(), small_config());
  ASSERT_TRUE(result.log.best_epoch.has_value());
  const auto retrained = retrain_with_val(result.log, make, t.task.train, t.task.val,
                                          t.task.features, small_config());

  // Same thing done by hand: best_epoch epochs on the concatenation.
  std::vector<data::QAInstance> all = t.task.train;
  all.insert(all.end(), t.task.val.begin(), t.task.val.end());
  EXPECT_EQ(all.size(), t.task.train.size() + t.task.val.size());
  auto manual = make();
  auto c = small_config();
  c.max_epochs = *result.log.best_epoch;
  const auto manual_result = train::train(manual, TrainData{all, {}, t.task.features}, c);
  EXPECT_EQ(manual_result.log.epochs.size(), *result.log.best_epoch);
  EXPECT_EQ(model::save_checkpoint(retrained, {}), model::save_checkpoint(manual, {}));
}
