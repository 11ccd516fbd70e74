#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "metavl/oracles/gradcheck.hpp"
#include "metavl/rng.hpp"
#include "metavl/tensor.hpp"
#include "metavl/oracles/random_graph.hpp"

using namespace metavl;
using metavl::oracles::grad_check;

TEST(Backward, SquareAtThree) {
  auto x = Tensor<double>::scalar(3.0, true);
  auto f = mul(x, x);
  f.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, NonScalarLossThrows) {
  auto x = Tensor<double>({2, 2}, {1, 2, 3, 4}, true);
  EXPECT_THROW(relu(x).backward(), ShapeError);
}

TEST(Backward, ArgmaxInsideRecordedGraphThrows) {
  auto x = Tensor<double>({1, 3}, {1, 3, 2}, true);
  EXPECT_THROW(argmax_rows(scale(x, 2.0)), Error);
  NoGradGuard ng;
  EXPECT_EQ(argmax_rows(scale(x, 2.0)), std::vector<std::int32_t>{1});
}

TEST(Backward, SharedSubexpressionAccumulates) {
  auto x = Tensor<double>({1, 2}, {1.5, -2.0}, true);
  auto y = mul(x, x);
  auto f = sum(add(y, y));
  f.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -8.0);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  auto x = Tensor<double>::scalar(2.0, true);
  Tensor<double> y = x;
  {
    NoGradGuard ng;
    y = mul(x, x);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(grad_enabled());
}

TEST(Backward, TwoLayerNetMatchesFiniteDifferences) {
  // 5 -> 6 -> 4 with biases: 30 + 6 + 24 + 4 weights plus 15 input entries.
  Rng rng(7);
  auto rnd = [&](Shape s) {
    std::vector<double> v(shape_numel(s));
    for (auto& x : v) x = normal(rng);
    return Tensor<double>(s, v, true);
  };
  std::vector<Tensor<double>> leaves{rnd({3, 5}), rnd({5, 6}), rnd({6}), rnd({6, 4}), rnd({4})};
  std::size_t params = 0;
  for (std::size_t i = 1; i < leaves.size(); ++i) params += leaves[i].numel();
  EXPECT_EQ(params, 64u);
  std::vector<std::int32_t> targets{0, 3, 1};
  std::vector<bool> mask(3, true);
  auto res = grad_check(leaves, [&](std::vector<Tensor<double>>& l) {
    auto h = gelu(add_bias(matmul(l[0], l[1]), l[2]));
    return masked_cross_entropy(add_bias(matmul(h, l[3]), l[4]), targets, mask);
  });
  EXPECT_LT(res.max_rel_error, 1e-4);
  EXPECT_EQ(res.checked, 79u);
}

TEST(GradCheck, RandomGraphsCoverEveryOp) {
  Rng rng(2024);
  std::set<std::string> covered;
  double worst = 0.0;
  for (int g = 0; g < 120; ++g) {
    auto graph = metavl::oracles::random_graph(rng, std::size_t(g));
    covered.insert(graph.ops.begin(), graph.ops.end());
    auto res = grad_check(graph.leaves, graph.build);
    worst = std::max(worst, res.max_rel_error);
    EXPECT_LT(res.max_rel_error, 1e-4) << "graph " << g << ": " << graph.describe();
  }
  for (const auto& op : metavl::oracles::all_ops()) EXPECT_TRUE(covered.count(op)) << op;
  RecordProperty("worst_rel_error", std::to_string(worst));
}

TEST(Softmax, RowsAreDistributions) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = std::size_t(uniform_int(rng, 1, 6)), n = std::size_t(uniform_int(rng, 1, 9));
    std::vector<float> v(m * n);
    for (auto& x : v) x = float(normal(rng) * 30.0);
    Tensor<float> x({m, n}, v);
    for (const auto& s : {softmax(x), causal_softmax(x, n > m ? n - m : 0)}) {
      for (std::size_t r = 0; r < m; ++r) {
        double total = 0;
        for (std::size_t c = 0; c < n; ++c) {
          EXPECT_GE(s.at(r, c), 0.0f);
          total += s.at(r, c);
        }
        EXPECT_NEAR(total, 1.0, 1e-6);
      }
    }
  }
}

TEST(Softmax, CausalMaskZeroesFuture) {
  Tensor<double> x({2, 3}, {1, 2, 3, 4, 5, 6});
  auto s = causal_softmax(x, 1);
  EXPECT_EQ(s.at(0, 2), 0.0);
  EXPECT_GT(s.at(0, 1), 0.0);
  EXPECT_GT(s.at(1, 2), 0.0);
}

TEST(CrossEntropy, UniformLogits) {
  auto logits = Tensor<double>::zeros({1, 10});
  std::vector<std::int32_t> t{4};
  EXPECT_NEAR(masked_cross_entropy(logits, t, {true}).item(), std::log(10.0), 1e-12);
}

TEST(CrossEntropy, HandComputedThreePositions) {
  // Rows 0 and 2 are masked in; row 1 would contribute 4.0 + log(1 + e^-4).
  Tensor<double> logits({3, 2}, {0.0, 0.0, 4.0, 0.0, 1.0, 2.0}, true);
  std::vector<std::int32_t> t{1, 1, 0};
  auto loss = masked_cross_entropy(logits, t, {true, false, true});
  const double expected = 0.5 * (std::log(2.0) + (2.0 + std::log(std::exp(-1.0) + 1.0) - 1.0));
  EXPECT_NEAR(loss.item(), expected, 1e-12);
  loss.backward();
  EXPECT_EQ(logits.grad()[2], 0.0);
  EXPECT_EQ(logits.grad()[3], 0.0);
}

TEST(CrossEntropy, AllFalseMaskThrows) {
  auto logits = Tensor<double>::zeros({2, 3});
  std::vector<std::int32_t> t{0, 0};
  EXPECT_THROW(masked_cross_entropy(logits, t, {false, false}), Error);
}

TEST(Tensor, ShapeInvariant) {
  EXPECT_THROW(Tensor<double>({2, 3}, {1, 2, 3}), ShapeError);
  auto x = Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  sum(x).backward();
  EXPECT_EQ(x.grad().size(), x.numel());
}
