// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include "vqa/graph.hpp"
#include "vqa/layers.hpp"
#include "vqa/model.hpp"
#include "vqa/synthetic.hpp"
#include "vqa/training.hpp"

using namespace vqa;

namespace {

Tensor random_tensor(Shape shape, Rng &rng) {
  Tensor t(std::move(shape));
  for (auto &x : t.data())
    x = rng.normal();
  return t;
}

void BM_Affine(benchmark::State &state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  Parameter w("w", random_tensor({n, n}, rng));
  Parameter b("b", random_tensor({n}, rng));
  const Tensor x = random_tensor({36, n}, rng);
  for (auto _ : state) {
    ad::Graph g;
    auto y = ad::affine(g.constant(x), g.param(w), g.param(b));
    g.backward(ad::sum(y));
    benchmark::DoNotOptimize(w.gradient.data().data());
    w.zero_grad();
    b.zero_grad();
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(36 * n * n));
}
BENCHMARK(BM_Affine)->Arg(64)->Arg(256)->Arg(512);

void BM_GatedTanh(benchmark::State &state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  nn::NonLinearLayer layer("f", n, n, nn::Activation::gated_tanh, rng);
  const Tensor x = random_tensor({n}, rng);
  for (auto _ : state) {
    ad::Graph g;
    auto y = nn::gated_tanh(g, layer, g.constant(x));
    g.backward(ad::sum(y));
    benchmark::DoNotOptimize(layer.weight.gradient.data().data());
    std::vector<Parameter *> params;
    layer.collect(params);
    for (auto *p : params)
      p->zero_grad();
  }
}
BENCHMARK(BM_GatedTanh)->Arg(64)->Arg(512);

struct ModelFixture {
  synth::PreparedTask task;
  model::VqaModel model;

  explicit ModelFixture(std::size_t hidden)
      : task(synth::prepare(synth::generate(synth::SynthSpec{}))),
        model(task.model_config(hidden), 7) {}
};

void BM_ModelForward(benchmark::State &state) {
  ModelFixture fx(static_cast<std::size_t>(state.range(0)));
  const auto &q = fx.task.train.front();
  const auto &features = fx.task.features.at(q.image_id);
  for (auto _ : state)
    benchmark::DoNotOptimize(fx.model.predict(q.token_ids, features).answer);
}
BENCHMARK(BM_ModelForward)->Arg(64)->Arg(256);

void BM_BatchForwardBackward(benchmark::State &state) {
  ModelFixture fx(static_cast<std::size_t>(state.range(0)));
  const std::size_t batch = 8;
  std::vector<const data::QAInstance *> items;
  for (std::size_t i = 0; i < batch; ++i)
    items.push_back(&fx.task.train[i]);
  for (auto _ : state) {
    ad::Graph g;
    auto loss = train::batch_loss(g, fx.model, items, fx.task.features, train::TargetMode::soft,
                                  train::Loss::soft_bce);
    g.backward(loss);
    benchmark::DoNotOptimize(loss.value().item());
    for (auto *p : fx.model.parameters())
      p->zero_grad();
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch));
}
BENCHMARK(BM_BatchForwardBackward)->Arg(64)->Arg(256);

void BM_BalancedPairShuffle(benchmark::State &state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::vector<std::optional<std::int64_t>> ids(n);
  for (std::size_t i = 0; i + 1 < n; i += 4) {
    ids[i] = static_cast<std::int64_t>(i);
    ids[i + 1] = static_cast<std::int64_t>(i);
  }
  std::uint64_t seed = 0;
  for (auto _ : state)
    benchmark::DoNotOptimize(data::balanced_pair_shuffle(ids, 256, ++seed).data());
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_BalancedPairShuffle)->Arg(10000)->Arg(100000);

} // namespace

BENCHMARK_MAIN();
