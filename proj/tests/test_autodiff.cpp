#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "lusoforge/core/ops.hpp"
#include "lusoforge/core/optimizer.hpp"
#include "test_util.hpp"

namespace lusoforge {
namespace {

using ad::Graph;
using ad::Var;
using testing::finite_difference_check;
using testing::random_tensor;

TEST(Matmul, IdentityTimesMatrix) {
  Graph<float> g;
  auto a = g.constant(Tensor<float>({2, 2}, {1, 0, 0, 1}));
  auto b = g.constant(Tensor<float>({2, 2}, {1, 2, 3, 4}));
  auto c = ad::matmul(a, b);
  EXPECT_EQ(c.value(), Tensor<float>({2, 2}, {1, 2, 3, 4}));
}

TEST(Matmul, ZeroMatrix) {
  Graph<float> g;
  auto a = g.constant(Tensor<float>({2, 2}, 0.0f));
  auto b = g.constant(Tensor<float>({2, 2}, {5, -6, 7, 8}));
  for (float v : ad::matmul(a, b).value().data()) EXPECT_EQ(v, 0.0f);
}

TEST(Matmul, MatchesNaiveTripleLoop) {
  Rng rng(7);
  auto at = random_tensor<double>({5, 4}, rng);
  auto bt = random_tensor<double>({4, 3}, rng);
  const auto expected = testing::naive_matmul(at.storage(), bt.storage(), 5, 4, 3);
  Graph<double> g;
  auto c = ad::matmul(g.constant(at), g.constant(bt));
  ASSERT_EQ(c.shape(), (Shape{5, 3}));
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(c.value()[i], expected[i], 1e-6);
}

TEST(Matmul, TransposeFlagsAndBroadcastBatch) {
  Rng rng(3);
  auto at = random_tensor<double>({2, 3, 4, 5}, rng);  // batch [2,3], stored 4x5, used transposed
  auto bt = random_tensor<double>({3, 6, 4}, rng);     // batch [3], stored 6x4, used transposed
  Graph<double> g;
  auto c = ad::matmul(g.constant(at), g.constant(bt), ad::Transpose::yes, ad::Transpose::yes);
  ASSERT_EQ(c.shape(), (Shape{2, 3, 5, 6}));
  for (std::size_t b0 = 0; b0 < 2; ++b0)
    for (std::size_t b1 = 0; b1 < 3; ++b1)
      for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 6; ++j) {
          double s = 0;
          for (std::size_t p = 0; p < 4; ++p) s += at[((b0 * 3 + b1) * 4 + p) * 5 + i] * bt[(b1 * 6 + j) * 4 + p];
          EXPECT_NEAR(c.value()[((b0 * 3 + b1) * 5 + i) * 6 + j], s, 1e-10);
        }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Graph<float> g;
  auto a = g.constant(Tensor<float>({2, 3}));
  auto b = g.constant(Tensor<float>({4, 5}));
  try {
    ad::matmul(a, b);
    FAIL() << "expected shape_error";
  } catch (const shape_error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4, 5]"), std::string::npos) << msg;
  }
}

TEST(Softmax, UniformForEqualInputs) {
  Graph<float> g;
  auto y = ad::softmax(g.constant(Tensor<float>({3}, {0, 0, 0})));
  for (float v : y.value().data()) EXPECT_FLOAT_EQ(v, 1.0f / 3.0f);
}

TEST(Softmax, StableForLargeInputs) {
  Graph<float> g;
  auto y = ad::softmax(g.constant(Tensor<float>({2}, {1000, 0})));
  EXPECT_TRUE(std::isfinite(y.value()[0]));
  EXPECT_NEAR(y.value()[0], 1.0f, 1e-6);
  EXPECT_NEAR(y.value()[1], 0.0f, 1e-6);
}

TEST(Softmax, MatchesDirectFormula) {
  Graph<double> g;
  auto y = ad::softmax(g.constant(Tensor<double>({3}, {1, 2, 3})));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(y.value()[0], std::exp(1.0) / z, 1e-7);
  EXPECT_NEAR(y.value()[1], std::exp(2.0) / z, 1e-7);
  EXPECT_NEAR(y.value()[2], std::exp(3.0) / z, 1e-7);
}

TEST(Softmax, NanPropagates) {
  Graph<float> g;
  auto y = ad::softmax(g.constant(Tensor<float>({3}, {1, NAN, 0})));
  for (float v : y.value().data()) EXPECT_TRUE(std::isnan(v));
}

TEST(Softmax, RowsSumToOneOnAnyAxis) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor<float>({3, 4, 5}, rng, 5.0);
    for (int axis : {0, 1, 2}) {
      Graph<float> g;
      auto y = ad::softmax(g.constant(x), axis);
      const auto& s = x.shape();
      std::size_t outer = 1, inner = 1;
      for (int i = 0; i < axis; ++i) outer *= s[i];
      for (std::size_t i = axis + 1; i < 3; ++i) inner *= s[i];
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          double sum = 0;
          for (std::size_t j = 0; j < s[axis]; ++j) {
            const float v = y.value()[(o * s[axis] + j) * inner + in];
            EXPECT_GE(v, 0.0f);
            sum += v;
          }
          EXPECT_NEAR(sum, 1.0, 1e-6);
        }
    }
  }
}

TEST(LayerNorm, ConstantVectorYieldsBiasExactly) {
  Graph<float> g;
  auto x = g.constant(Tensor<float>({4}, 2.5f));
  auto gain = g.constant(Tensor<float>({4}, {1, 2, 3, 4}));
  auto bias = g.constant(Tensor<float>({4}, {0.5f, -1, 2, 7}));
  auto y = ad::layer_norm(x, gain, bias, 1e-7f);
  EXPECT_EQ(y.value(), bias.value());
}

// erf by its Maclaurin series in long double; converges quickly for |z| <= 2.2.
long double erf_series(long double z) {
  long double term = z, sum = z;
  for (int n = 1; n < 200; ++n) {
    term *= -z * z / n;
    const long double add = term / (2 * n + 1);
    sum += add;
    if (std::fabs(add) < 1e-30L) break;
  }
  return sum * 2.0L / std::sqrt(std::numbers::pi_v<long double>);
}

TEST(Gelu, ZeroAndSeriesReferenceGrid) {
  Graph<float> g;
  Tensor<float> grid({61});
  for (int i = 0; i <= 60; ++i) grid[i] = -3.0f + 0.1f * static_cast<float>(i);
  auto y = ad::gelu(g.constant(grid));
  EXPECT_EQ(ad::gelu(g.constant(Tensor<float>({1}, 0.0f))).value()[0], 0.0f);
  for (int i = 0; i <= 60; ++i) {
    const long double x = grid[i];
    const long double ref = 0.5L * x * (1.0L + erf_series(x / std::sqrt(2.0L)));
    EXPECT_NEAR(y.value()[i], static_cast<double>(ref), 1e-5) << "x=" << grid[i];
  }
}

TEST(CrossEntropy, UniformLogitsGiveLogVocab) {
  for (std::size_t vocab : {2u, 7u, 64u, 8192u}) {
    Graph<double> g;
    auto logits = g.constant(Tensor<double>({3, vocab}, 0.25));
    std::vector<std::int64_t> labels{0, static_cast<std::int64_t>(vocab - 1), ad::ignore_label};
    EXPECT_NEAR(ad::cross_entropy(logits, labels).value().item(), std::log(static_cast<double>(vocab)), 1e-12);
  }
}

TEST(CrossEntropy, AllIgnoredIsAnExplicitError) {
  Graph<float> g;
  auto logits = g.constant(Tensor<float>({2, 4}));
  std::vector<std::int64_t> labels{ad::ignore_label, ad::ignore_label};
  EXPECT_THROW(ad::cross_entropy(logits, labels), contract_error);
}

TEST(CrossEntropy, NonNegative) {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    Graph<float> g;
    auto logits = g.constant(random_tensor<float>({4, 9}, rng, 10.0));
    std::vector<std::int64_t> labels;
    for (int i = 0; i < 4; ++i) labels.push_back(static_cast<std::int64_t>(rng.below(9)));
    EXPECT_GE(ad::cross_entropy(logits, labels).value().item(), 0.0f);
  }
}

TEST(Backward, SumGivesAllOnes) {
  ParameterSet<double> ps;
  auto& w = ps.add("w", Tensor<double>({2, 3}, {1, -2, 3, 4, 5, -6}), false);
  Graph<double> g;
  auto loss = ad::sum_all(g.parameter(w));
  g.backward(loss);
  for (double v : w.grad.data()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, ProductRule) {
  ParameterSet<double> ps;
  auto& x = ps.add("x", Tensor<double>({1, 1}, {2.0}), false);
  auto& y = ps.add("y", Tensor<double>({1, 1}, {3.0}), false);
  Graph<double> g;
  auto loss = ad::matmul(g.parameter(x), g.parameter(y));
  g.backward(loss);
  EXPECT_EQ(x.grad[0], 3.0);
  EXPECT_EQ(y.grad[0], 2.0);
}

TEST(Backward, NonScalarIsContractError) {
  ParameterSet<float> ps;
  auto& w = ps.add("w", Tensor<float>({2}, 1.0f), false);
  Graph<float> g;
  auto out = ad::scale(g.parameter(w), 2.0f);
  EXPECT_THROW(g.backward(out), contract_error);
}

TEST(Backward, ReuseRequiresReset) {
  ParameterSet<float> ps;
  auto& w = ps.add("w", Tensor<float>({2}, 1.0f), false);
  Graph<float> g;
  auto loss = ad::sum_all(g.parameter(w));
  g.backward(loss);
  EXPECT_THROW(g.backward(loss), contract_error);
  g.reset();
  auto again = ad::sum_all(g.parameter(w));
  EXPECT_NO_THROW(g.backward(again));
  EXPECT_EQ(w.grad[0], 2.0f);  // accumulated across both passes
}

TEST(Backward, SharedSubexpressionVisitedOnce) {
  // y = x + x; dy/dx = 2 regardless of how many consumers a node has.
  ParameterSet<double> ps;
  auto& x = ps.add("x", Tensor<double>({3}, 1.0), false);
  Graph<double> g;
  auto v = ad::scale(g.parameter(x), 1.0);
  auto loss = ad::sum_all(ad::add(v, v));
  g.backward(loss);
  for (double d : x.grad.data()) EXPECT_EQ(d, 2.0);
}

// ---------------------------------------------------------------------------
// Per-operator finite-difference checks (h=1e-3, rtol 1e-2, atol 1e-6). Each
// loss contracts the operator output with a fixed random tensor so every
// output element contributes.

class OperatorGradient : public ::testing::Test {
 protected:
  Rng rng{1234};
  ParameterSet<double> params;

  Var<double> contract(Graph<double>& g, Var<double> out, std::uint64_t salt) {
    Rng r(salt);
    auto weights = g.constant(random_tensor<double>(out.shape(), r));
    const std::size_t n = out.size();
    return ad::reshape(ad::matmul(ad::reshape(out, {1, n}), ad::reshape(weights, {n, 1})), {});
  }

  void expect_pass(const std::function<Var<double>(Graph<double>&)>& fn) {
    const auto report = finite_difference_check(params, fn);
    EXPECT_GT(report.checked, 0u);
    EXPECT_EQ(report.failures, 0u) << report.worst;
  }
};

TEST_F(OperatorGradient, Matmul) {
  auto& a = params.add("a", random_tensor<double>({2, 3, 4}, rng), false);
  auto& b = params.add("b", random_tensor<double>({5, 4}, rng), false);
  expect_pass([&](Graph<double>& g) {
    return contract(g, ad::matmul(g.parameter(a), g.parameter(b), ad::Transpose::no, ad::Transpose::yes), 1);
  });
}

TEST_F(OperatorGradient, MatmulTransposedA) {
  auto& a = params.add("a", random_tensor<double>({3, 4, 2}, rng), false);
  auto& b = params.add("b", random_tensor<double>({3, 4, 5}, rng), false);
  expect_pass([&](Graph<double>& g) {
    return contract(g, ad::matmul(g.parameter(a), g.parameter(b), ad::Transpose::yes), 2);
  });
}

TEST_F(OperatorGradient, AddWithBroadcast) {
  auto& a = params.add("a", random_tensor<double>({2, 1, 3, 4}, rng), false);
  auto& b = params.add("b", random_tensor<double>({2, 3, 1}, rng), false);
  auto& c = params.add("c", random_tensor<double>({4}, rng), false);
  expect_pass([&](Graph<double>& g) {
    return contract(g, ad::add(ad::add(g.parameter(a), g.parameter(b)), g.parameter(c)), 3);
  });
}

TEST_F(OperatorGradient, ScaleSoftmax) {
  auto& x = params.add("x", random_tensor<double>({3, 4, 5}, rng), false);
  expect_pass([&](Graph<double>& g) {
    auto s = ad::softmax(ad::scale(g.parameter(x), 1.7), 1);
    return contract(g, ad::softmax(s, -1), 4);
  });
}

TEST_F(OperatorGradient, LayerNorm) {
  auto& x = params.add("x", random_tensor<double>({3, 6}, rng), false);
  auto& gain = params.add("gain", random_tensor<double>({6}, rng), false);
  auto& bias = params.add("bias", random_tensor<double>({6}, rng), false);
  expect_pass([&](Graph<double>& g) {
    return contract(g, ad::layer_norm(g.parameter(x), g.parameter(gain), g.parameter(bias), 1e-7), 5);
  });
}

TEST_F(OperatorGradient, Gelu) {
  auto& x = params.add("x", random_tensor<double>({4, 5}, rng, 2.0), false);
  expect_pass([&](Graph<double>& g) { return contract(g, ad::gelu(g.parameter(x)), 6); });
}

TEST_F(OperatorGradient, EmbeddingAndGather) {
  auto& table = params.add("table", random_tensor<double>({7, 3}, rng), false);
  const std::vector<std::int64_t> ids{0, 3, 3, 6, 1, 0};
  expect_pass([&](Graph<double>& g) { return contract(g, ad::embedding(g.parameter(table), ids, {2, 3}), 7); });
}

TEST_F(OperatorGradient, Conv1dWithPaddingMask) {
  auto& x = params.add("x", random_tensor<double>({2, 5, 3}, rng), false);
  auto& w = params.add("w", random_tensor<double>({3, 3, 4}, rng), false);
  auto& b = params.add("b", random_tensor<double>({4}, rng), false);
  const std::vector<std::uint8_t> valid{1, 1, 1, 1, 1, 1, 1, 1, 0, 0};
  expect_pass([&](Graph<double>& g) {
    return contract(g, ad::conv1d(g.parameter(x), g.parameter(w), g.parameter(b), valid), 8);
  });
}

TEST_F(OperatorGradient, Dropout) {
  auto& x = params.add("x", random_tensor<double>({4, 6}, rng), false);
  expect_pass([&](Graph<double>& g) {
    Rng drop(99);  // same mask on every evaluation
    return contract(g, ad::dropout(g.parameter(x), 0.3, drop, true), 9);
  });
}

TEST_F(OperatorGradient, CrossEntropy) {
  auto& logits = params.add("logits", random_tensor<double>({4, 6}, rng), false);
  const std::vector<std::int64_t> labels{2, ad::ignore_label, 5, 0};
  expect_pass([&](Graph<double>& g) { return ad::cross_entropy(g.parameter(logits), labels); });
}

TEST_F(OperatorGradient, PermuteReshape) {
  auto& x = params.add("x", random_tensor<double>({2, 3, 4}, rng), false);
  expect_pass([&](Graph<double>& g) {
    auto p = ad::permute(g.parameter(x), {2, 0, 1});
    return contract(g, ad::reshape(p, {4, 6}), 10);
  });
}

TEST_F(OperatorGradient, MeanSquaredError) {
  auto& p = params.add("p", random_tensor<double>({5, 1}, rng), false);
  const auto target = random_tensor<double>({5, 1}, rng);
  expect_pass([&](Graph<double>& g) { return ad::mse(g.parameter(p), g.constant(target)); });
}

TEST(Dropout, InvertedScalingAndEvalIdentity) {
  Graph<float> g;
  Rng rng(1);
  auto x = g.constant(Tensor<float>({10000}, 1.0f));
  auto eval = ad::dropout(x, 0.25, rng, false);
  EXPECT_EQ(eval.id(), x.id());
  auto y = ad::dropout(x, 0.25, rng, true);
  double sum = 0;
  std::size_t zeros = 0;
  for (float v : y.value().data()) {
    sum += v;
    if (v == 0.0f) ++zeros;
    else EXPECT_FLOAT_EQ(v, 1.0f / 0.75f);
  }
  EXPECT_NEAR(sum / 10000.0, 1.0, 0.03);
  EXPECT_NEAR(static_cast<double>(zeros) / 10000.0, 0.25, 0.02);
}

// ---------------------------------------------------------------------------
// Optimizer

TEST(Adam, ZeroLearningRateLeavesParametersUnchanged) {
  ParameterSet<float> ps;
  Rng rng(2);
  auto& w = ps.add("w", random_tensor<float>({4, 4}, rng), true);
  const auto before = w.value;
  w.grad = random_tensor<float>({4, 4}, rng);
  Adam<float> opt(AdamConfig{.weight_decay = 0.0});
  opt.step(ps, 0.0);
  EXPECT_EQ(w.value, before);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  // m_hat = g and v_hat = g^2 after one step, so the step is lr * g/(|g| + eps).
  ParameterSet<double> ps;
  auto& w = ps.add("w", Tensor<double>({1}, {0.5}), false);
  w.grad[0] = 1.0;
  Adam<double> opt(AdamConfig{.weight_decay = 0.0});
  const double lr = 1e-3;
  opt.step(ps, lr);
  EXPECT_NEAR(w.value[0] - 0.5, -lr / (1.0 + 1e-6), 1e-15);
  EXPECT_EQ(opt.state().step, 1u);
}

TEST(Adam, DeterministicAcrossRuns) {
  auto run = [] {
    ParameterSet<float> ps;
    Rng rng(17);
    auto& w = ps.add("w", random_tensor<float>({8, 8}, rng), true);
    auto& b = ps.add("b", random_tensor<float>({8}, rng), false);
    Adam<float> opt;
    for (int s = 0; s < 10; ++s) {
      Rng gr(100 + s);
      w.grad = random_tensor<float>({8, 8}, gr);
      b.grad = random_tensor<float>({8}, gr);
      opt.step(ps, 1e-2);
    }
    return std::make_pair(w.value, b.value);
  };
  const auto first = run();
  const auto second = run();
  EXPECT_EQ(first.first, second.first);
  EXPECT_EQ(first.second, second.second);
}

TEST(Adam, NanGradientAbortsNamingParameter) {
  ParameterSet<float> ps;
  ps.add("ok", Tensor<float>({2}, 1.0f), false);
  auto& bad = ps.add("encoder.layer.0.attn.query.weight", Tensor<float>({2}, 1.0f), true);
  bad.grad[1] = NAN;
  Adam<float> opt;
  try {
    opt.step(ps, 1e-3);
    FAIL() << "expected numerical_error";
  } catch (const numerical_error& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.layer.0.attn.query.weight"), std::string::npos);
  }
  EXPECT_EQ(bad.value[0], 1.0f);
}

TEST(Adam, DecoupledWeightDecayOnlyOnFlaggedParameters) {
  ParameterSet<double> ps;
  auto& w = ps.add("w", Tensor<double>({1}, {2.0}), true);
  auto& b = ps.add("b", Tensor<double>({1}, {2.0}), false);
  Adam<double> opt(AdamConfig{.weight_decay = 0.5});
  opt.step(ps, 0.1);  // zero gradients: only decay acts
  EXPECT_NEAR(w.value[0], 2.0 - 0.1 * 0.5 * 2.0, 1e-15);
  EXPECT_EQ(b.value[0], 2.0);
}

}  // namespace
}  // namespace lusoforge
