// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "vqa/grad_check.hpp"
#include "vqa/graph.hpp"
#include "vqa/rng.hpp"

namespace vqa::ad {
namespace {

Tensor random_tensor(Shape shape, Rng &rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto &v : t.data())
    v = scale * rng.normal();
  return t;
}

void expect_tensor_near(const Tensor &a, const Tensor &b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.size(); ++i)
    EXPECT_NEAR(a[i], b[i], tol) << "at " << i;
}

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor(Shape{2, 2, 2, 2}), ShapeError);
}

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  Graph g;
  auto eye = g.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  auto m = g.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  EXPECT_EQ(matmul(eye, m).value(), Tensor::matrix(2, 2, {1, 2, 3, 4}));
}

TEST(Matmul, HandEvaluatedProduct) {
  Graph g;
  auto a = g.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  auto b = g.constant(Tensor::matrix(2, 2, {5, 6, 7, 8}));
  EXPECT_EQ(matmul(a, b).value(), Tensor::matrix(2, 2, {19, 22, 43, 50}));
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  Graph g;
  auto a = g.constant(Tensor({2, 3}));
  auto b = g.constant(Tensor({2, 3}));
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError &e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3] and [2x3]"), std::string::npos) << msg;
  }
}

TEST(Elementwise, HadamardWithOnesIsIdentity) {
  Rng rng(1);
  Graph g;
  auto x = g.constant(random_tensor({7}, rng));
  auto ones = g.constant(Tensor({7}, 1.0));
  EXPECT_EQ(hadamard(x, ones).value(), x.value());
}

TEST(Elementwise, HadamardCommutes) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    Graph g;
    auto a = g.constant(random_tensor({3, 4}, rng));
    auto b = g.constant(random_tensor({3, 4}, rng));
    EXPECT_EQ(hadamard(a, b).value(), hadamard(b, a).value());
  }
}

TEST(Elementwise, KnownValues) {
  Graph g;
  EXPECT_EQ(sigmoid(g.constant(Tensor::vector({0.0}))).value()[0], 0.5);
  EXPECT_NEAR(tanh(g.constant(Tensor::vector({0.5}))).value()[0], 0.462117, 1e-6);
}

TEST(Elementwise, SigmoidStableAtExtremes) {
  EXPECT_EQ(sigmoid(-1000.0), 0.0);
  EXPECT_EQ(sigmoid(1000.0), 1.0);
  EXPECT_TRUE(std::isfinite(sigmoid(-745.0)));
}

TEST(Elementwise, BinaryKindsRejectShapeMismatch) {
  Graph g;
  auto a = g.constant(Tensor({3}));
  auto b = g.constant(Tensor({4}));
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(sub(a, b), ShapeError);
  EXPECT_THROW(hadamard(a, b), ShapeError);
}

TEST(Softmax, ConstantInputIsUniform) {
  for (double c : {-3.0, 0.0, 17.5}) {
    Graph g;
    auto y = softmax(g.constant(Tensor({4}, c)));
    expect_tensor_near(y.value(), Tensor({4}, 0.25), 1e-15);
  }
}

TEST(Softmax, HandEvaluatedLog3) {
  Graph g;
  auto y = softmax(g.constant(Tensor::vector({0.0, std::log(3.0)})));
  expect_tensor_near(y.value(), Tensor::vector({0.25, 0.75}), 1e-15);
}

TEST(Softmax, LargeInputsDoNotOverflow) {
  Graph g;
  auto y = softmax(g.constant(Tensor::vector({1000.0, 0.0})));
  EXPECT_NEAR(y.value()[0], 1.0, 1e-15);
  EXPECT_NEAR(y.value()[1], 0.0, 1e-15);
}

TEST(Softmax, EmptyVectorRejected) {
  Graph g;
  EXPECT_THROW(softmax(g.constant(Tensor::vector(std::vector<double>{}))),
               std::invalid_argument);
}

TEST(Softmax, SumsToOneAndIsShiftInvariant) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const auto n = 1 + rng.below(12);
    Graph g;
    const Tensor x = random_tensor({n}, rng, 5.0);
    const double shift = rng.uniform(-50.0, 50.0);
    Tensor shifted = x;
    for (auto &v : shifted.data())
      v += shift;
    auto y = softmax(g.constant(x)).value();
    auto ys = softmax(g.constant(shifted)).value();
    double total = std::accumulate(y.data().begin(), y.data().end(), 0.0);
    EXPECT_NEAR(total, 1.0, 1e-12);
    expect_tensor_near(y, ys, 1e-12);
  }
}

TEST(Concat, AppendsAndNeutralElement) {
  Graph g;
  auto ab = concat(g.constant(Tensor::vector({1, 2})), g.constant(Tensor::vector({3})));
  EXPECT_EQ(ab.value(), Tensor::vector({1, 2, 3}));
  auto x = g.constant(Tensor::vector({4, 5}));
  EXPECT_EQ(concat(x, g.constant(Tensor())).value(), x.value());
}

TEST(Concat, RankMismatchRejected) {
  Graph g;
  EXPECT_THROW(concat(g.constant(Tensor({2})), g.constant(Tensor({2, 2}))), ShapeError);
}

TEST(Concat, BackwardOfSumGivesOnes) {
  Parameter a("a", Tensor::vector({0.3, -1.0}));
  Parameter b("b", Tensor::vector({2.0, 0.5, 7.0}));
  Graph g;
  g.backward(sum(concat(g.param(a), g.param(b))));
  EXPECT_EQ(a.gradient, Tensor({2}, 1.0));
  EXPECT_EQ(b.gradient, Tensor({3}, 1.0));

  auto result = grad_check([&](Graph &gg) { return sum(concat(gg.param(a), gg.param(b))); });
  EXPECT_LT(result.max_relative_error, 1e-4);
}

TEST(Backward, SumOfSquares) {
  Parameter w("w", Tensor::vector({1, 2}));
  Graph g;
  auto wv = g.param(w);
  g.backward(sum(hadamard(wv, wv)));
  EXPECT_EQ(w.gradient, Tensor::vector({2, 4}));
}

TEST(Backward, DisconnectedParameterGetsZeros) {
  Parameter w("w", Tensor::vector({1, 2}));
  Parameter u("u", Tensor::vector({3, 4}));
  w.gradient = Tensor({2}, 9.0);
  Graph g;
  g.param(w);
  g.backward(sum(g.param(u)));
  EXPECT_EQ(w.gradient, Tensor({2}));
}

TEST(Backward, RequiresScalarAndForwardPass) {
  Graph g;
  EXPECT_THROW(g.backward(Var{}), std::logic_error);
  auto v = g.constant(Tensor({3}));
  EXPECT_THROW(g.backward(v), ShapeError);
}

TEST(Backward, RepeatedRunsAreBitIdentical) {
  Rng rng(4);
  Parameter w("w", random_tensor({4, 3}, rng));
  Parameter x("x", random_tensor({3}, rng));
  Graph g;
  auto loss = sum(tanh(affine(g.param(x), g.param(w))));
  g.backward(loss);
  const Tensor first_w = w.gradient, first_x = x.gradient;
  g.backward(loss);
  EXPECT_EQ(w.gradient, first_w);
  EXPECT_EQ(x.gradient, first_x);
}

TEST(Backward, MaskedRowsReceiveZeroGradient) {
  Parameter table("table", Tensor({4, 2}, 1.0));
  table.trainable_rows = std::vector<bool>{false, true, true, true};
  Graph g;
  const std::vector<int> ids{0, 1, 0, 3};
  g.backward(sum(gather_rows(g.param(table), ids)));
  EXPECT_EQ(table.gradient, Tensor::matrix(4, 2, {0, 0, 1, 1, 0, 0, 1, 1}));
}

TEST(GatherRows, OutOfRangeRejected) {
  Parameter table("table", Tensor({3, 2}));
  Graph g;
  const std::vector<int> ids{3};
  EXPECT_THROW(gather_rows(g.param(table), ids), std::out_of_range);
}

// Every registered operation against central differences at random points.
class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
  Rng rng(100 + GetParam());
  Parameter a("a", random_tensor({3, 4}, rng));
  Parameter b("b", random_tensor({4, 2}, rng));
  Parameter v("v", random_tensor({4}, rng));
  Parameter u("u", random_tensor({4}, rng));
  Parameter bias("bias", random_tensor({3}, rng));
  Parameter table("table", random_tensor({5, 3}, rng));
  const Tensor probe2 = random_tensor({3, 2}, rng);
  const Tensor probe_v = random_tensor({4}, rng);
  const Tensor probe_k = random_tensor({3, 3}, rng);
  const Tensor probe_c = random_tensor({3, 8}, rng);
  const std::vector<int> ids{4, 0, 4, 2};

  std::vector<std::pair<const char *, GraphBuilder>> cases = {
      {"matmul", [&](Graph &g) {
         return sum(hadamard(matmul(g.param(a), g.param(b)), g.constant(probe2)));
       }},
      {"affine_vec", [&](Graph &g) {
         return sum(tanh(affine(g.param(v), g.param(a), g.param(bias))));
       }},
      {"affine_rows", [&](Graph &g) {
         auto x = reshape(g.param(a), {3, 4});
         return sum(hadamard(affine(x, g.param(a), g.param(bias)), g.constant(probe_k)));
       }},
      {"add_sub", [&](Graph &g) {
         return sum(hadamard(sub(add(g.param(v), g.param(u)), scale(g.param(u), 3.0)),
                             g.constant(probe_v)));
       }},
      {"hadamard", [&](Graph &g) { return sum(hadamard(g.param(v), g.param(u))); }},
      {"tanh", [&](Graph &g) { return sum(hadamard(tanh(g.param(v)), g.constant(probe_v))); }},
      {"sigmoid", [&](Graph &g) {
         return sum(hadamard(sigmoid(g.param(v)), g.constant(probe_v)));
       }},
      {"relu", [&](Graph &g) { return sum(hadamard(relu(g.param(v)), g.constant(probe_v))); }},
      {"softmax", [&](Graph &g) {
         return sum(hadamard(softmax(g.param(v)), g.constant(probe_v)));
       }},
      {"concat_rows", [&](Graph &g) {
         auto left = reshape(g.param(a), {3, 4});
         auto right = tile_rows(g.param(v), 3);
         return sum(hadamard(concat(left, right), g.constant(probe_c)));
       }},
      {"row_sum_rows", [&](Graph &g) {
         auto m = g.param(a);
         return sum(hadamard(add(row(m, 1), sum_rows(m)), g.constant(probe_v)));
       }},
      {"gather_rows", [&](Graph &g) {
         auto rows = gather_rows(g.param(table), ids);
         return sum(tanh(rows));
       }},
  };
  for (auto &[name, builder] : cases) {
    auto result = grad_check(builder);
    EXPECT_LT(result.max_relative_error, 1e-4)
        << name << " worst " << result.worst_parameter << "[" << result.worst_index << "]";
    EXPECT_GT(result.entries_checked, 0u) << name;
  }
}

INSTANTIATE_TEST_SUITE_P(RandomPoints, OpGradient, ::testing::Range(0, 5));

TEST(GradCheck, DetectsNondeterministicBuilder) {
  Parameter w("w", Tensor::vector({1.0}));
  int calls = 0;
  auto builder = [&](Graph &g) {
    ++calls;
    return sum(scale(g.param(w), static_cast<double>(calls)));
  };
  EXPECT_THROW(grad_check(builder), NondeterministicBuilder);
}

TEST(GradCheck, ReportsWrongGradient) {
  Parameter w("w", Tensor::vector({0.7, -0.2}));
  // Forward computes 2w but claims derivative 1.
  auto builder = [&](Graph &g) {
    auto x = g.param(w);
    Tensor y = x.value();
    for (auto &e : y.data())
      e *= 2.0;
    auto bad = g.record(std::move(y), {x}, [](const BackwardContext &c) {
      for (std::size_t i = 0; i < c.in_grads[0]->size(); ++i)
        (*c.in_grads[0])[i] += c.out_grad[i];
    });
    return sum(bad);
  };
  EXPECT_GT(grad_check(builder).max_relative_error, 0.4);
}

} // namespace
} // namespace vqa::ad
