#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "storylab/adamw.hpp"
#include "storylab/ops.hpp"
#include "support/finite_diff.hpp"

using namespace storylab;
using storylab::testing::gradient_rel_error;
using storylab::testing::Leaves;

namespace {

Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor<double>::from(std::move(shape), std::move(v));
}

// Weighted sum so that gradient checks see a non-uniform upstream gradient.
Tensor<double> weighted_sum(const Tensor<double>& x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(x, random_tensor(x.shape(), rng)));
}

}  // namespace

TEST(RmsNorm, UnitRmsIsFixedPoint) {
  auto x = Tensor<float>::from({4}, {1, 1, 1, 1});
  auto g = Tensor<float>::from({4}, {1, 1, 1, 1});
  auto y = rms_norm(x, g, 0.0f);
  for (float v : y.data()) EXPECT_FLOAT_EQ(v, 1.0f);
}

TEST(RmsNorm, ScalarOracle) {
  auto y = rms_norm(Tensor<double>::from({2}, {3, 4}), Tensor<double>::from({2}, {1, 1}), 0.0);
  // mean(x^2) = 12.5, rms = 3.53553
  EXPECT_NEAR(y.data()[0], 0.84853, 1e-4);
  EXPECT_NEAR(y.data()[1], 1.13137, 1e-4);
}

TEST(RmsNorm, ShapeMismatchThrows) {
  EXPECT_THROW(rms_norm(Tensor<double>::zeros({2, 3}), Tensor<double>::zeros({4}), 1e-6),
               DimensionError);
}

TEST(RmsNorm, GradientOfSumMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    Leaves leaves{random_tensor({3, 6}, rng), random_tensor({6}, rng)};
    auto f = [](const Leaves& l) { return sum(rms_norm(l[0], l[1], 1e-6)); };
    EXPECT_LT(gradient_rel_error(f, leaves), 1e-5) << "seed " << seed;
    auto g = [seed](const Leaves& l) { return weighted_sum(rms_norm(l[0], l[1], 1e-6), seed); };
    EXPECT_LT(gradient_rel_error(g, leaves), 1e-5) << "seed " << seed;
  }
}

TEST(Silu, ReferenceValues) {
  auto y = silu(Tensor<double>::from({3}, {0.0, 1.0, 20.0}));
  EXPECT_EQ(y.data()[0], 0.0);
  EXPECT_NEAR(y.data()[1], 0.73106, 1e-4);
  EXPECT_NEAR(y.data()[2], 20.0, 1e-6);
}

TEST(Matmul, IdentityAndHandArithmetic) {
  auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  auto eye = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  auto r = matmul(eye, a);
  EXPECT_EQ(std::vector<double>(r.data().begin(), r.data().end()), a.values());
  auto c = matmul(a, Tensor<double>::from({2, 1}, {1, 1}));
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c.data()[0], 3);
  EXPECT_EQ(c.data()[1], 7);
}

TEST(Matmul, InnerMismatchThrows) {
  EXPECT_THROW(matmul(Tensor<double>::zeros({2, 3}), Tensor<double>::zeros({2, 3})),
               DimensionError);
  EXPECT_THROW(matmul_nt(Tensor<double>::zeros({2, 3}), Tensor<double>::zeros({3, 2})),
               DimensionError);
}

TEST(Matmul, BatchedLeadingAxes) {
  std::mt19937_64 rng(3);
  auto a = random_tensor({2, 3, 4}, rng);
  auto b = random_tensor({2, 4, 5}, rng);
  auto c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 3, 5}));
  for (std::size_t bi = 0; bi < 2; ++bi)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double ref = 0;
        for (std::size_t k = 0; k < 4; ++k)
          ref += a.data()[bi * 12 + i * 4 + k] * b.data()[bi * 20 + k * 5 + j];
        EXPECT_NEAR(c.data()[bi * 15 + i * 5 + j], ref, 1e-12);
      }
}

TEST(Matmul, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(100 + seed);
    Leaves two_d{random_tensor({3, 4}, rng), random_tensor({4, 5}, rng)};
    EXPECT_LT(gradient_rel_error(
                  [seed](const Leaves& l) { return weighted_sum(matmul(l[0], l[1]), seed); },
                  two_d),
              1e-5);
    Leaves batched{random_tensor({2, 3, 4}, rng), random_tensor({2, 4, 2}, rng)};
    EXPECT_LT(gradient_rel_error(
                  [seed](const Leaves& l) { return weighted_sum(matmul(l[0], l[1]), seed); },
                  batched),
              1e-5);
    Leaves nt{random_tensor({3, 4}, rng), random_tensor({6, 4}, rng)};
    EXPECT_LT(gradient_rel_error(
                  [seed](const Leaves& l) { return weighted_sum(matmul_nt(l[0], l[1]), seed); },
                  nt),
              1e-5);
  }
}

TEST(CrossEntropy, UniformLogitsGiveLogVocab) {
  const std::size_t vocab = 37;
  auto logits = Tensor<double>::zeros({2, vocab});
  std::vector<std::int32_t> targets{3, 20};
  EXPECT_NEAR(cross_entropy(logits, targets).item(), std::log(double(vocab)), 1e-12);
}

TEST(CrossEntropy, SaturatedCorrectPrediction) {
  std::vector<double> v(5, 0.0);
  v[2] = 1e6;
  std::vector<std::int32_t> target{2};
  EXPECT_LT(cross_entropy(Tensor<double>::from({1, 5}, v), target).item(), 1e-6);
}

TEST(CrossEntropy, MatchesDirectSoftmaxOracle) {
  std::mt19937_64 rng(7);
  auto logits = random_tensor({3, 5}, rng, 3.0);
  std::vector<std::int32_t> targets{4, 0, 2};
  double oracle = 0;
  for (std::size_t r = 0; r < 3; ++r) {
    double z = 0;
    for (std::size_t j = 0; j < 5; ++j) z += std::exp(logits.data()[r * 5 + j]);
    oracle += -std::log(std::exp(logits.data()[r * 5 + targets[r]]) / z);
  }
  oracle /= 3;
  EXPECT_NEAR(cross_entropy(logits, targets).item(), oracle, 1e-6);
}

TEST(CrossEntropy, OutOfRangeTargetThrows) {
  std::vector<std::int32_t> bad{5};
  EXPECT_THROW(cross_entropy(Tensor<double>::zeros({1, 5}), bad), IndexError);
  std::vector<std::int32_t> negative{-1};
  EXPECT_THROW(cross_entropy(Tensor<double>::zeros({1, 5}), negative), IndexError);
}

TEST(Backward, ElementaryGradients) {
  auto x = Tensor<double>::from({3}, {1, 2, 3}, true);
  sum(x).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);

  auto a = Tensor<double>::scalar(3.0, true);
  auto b = Tensor<double>::scalar(-2.5, true);
  mul(a, b).backward();
  EXPECT_EQ(a.grad()[0], -2.5);
  EXPECT_EQ(b.grad()[0], 3.0);
}

TEST(Backward, AccumulatesUntilZeroGrad) {
  auto x = Tensor<double>::from({2}, {1, 2}, true);
  auto loss = sum(scale(x, 3.0));
  loss.backward();
  loss.backward();
  EXPECT_EQ(x.grad()[0], 6.0);
  x.zero_grad();
  loss.backward();
  EXPECT_EQ(x.grad()[1], 3.0);
}

TEST(Backward, NonScalarIsContractError) {
  auto x = Tensor<double>::from({2}, {1, 2}, true);
  EXPECT_THROW(scale(x, 2.0).backward(), ContractError);
}

TEST(Backward, NoGradGuardSkipsRecording) {
  auto x = Tensor<double>::from({2}, {1, 2}, true);
  NoGradGuard guard;
  auto y = sum(x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Ops, EveryDifferentiableOpPassesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    auto check = [&](const char* name, auto f, Leaves leaves) {
      EXPECT_LT(gradient_rel_error(f, std::move(leaves)), 1e-5) << name << " seed " << seed;
    };
    check("add", [seed](const Leaves& l) { return weighted_sum(add(l[0], l[1]), seed); },
          {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)});
    check("sub", [seed](const Leaves& l) { return weighted_sum(sub(l[0], l[1]), seed); },
          {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)});
    check("mul", [seed](const Leaves& l) { return weighted_sum(mul(l[0], l[1]), seed); },
          {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)});
    check("add_row", [seed](const Leaves& l) { return weighted_sum(add_row(l[0], l[1]), seed); },
          {random_tensor({4, 3}, rng), random_tensor({3}, rng)});
    check("silu", [seed](const Leaves& l) { return weighted_sum(silu(l[0]), seed); },
          {random_tensor({3, 4}, rng, 2.0)});
    check("softmax", [seed](const Leaves& l) { return weighted_sum(softmax(l[0]), seed); },
          {random_tensor({3, 4}, rng)});
    check("mean", [](const Leaves& l) { return mean(mul(l[0], l[0])); },
          {random_tensor({3, 4}, rng)});
    check("mse", [](const Leaves& l) { return mse(l[0], l[1]); },
          {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)});
    check("l1_rows_mean", [](const Leaves& l) { return l1_rows_mean(l[0]); },
          {random_tensor({3, 4}, rng)});
    // relu away from its kink
    {
      auto x = random_tensor({3, 4}, rng);
      for (auto& v : x.mutable_data())
        if (std::abs(v) < 1e-3) v = 0.5;
      check("relu", [seed](const Leaves& l) { return weighted_sum(relu(l[0]), seed); }, {x});
    }
    std::vector<std::int32_t> ids{2, 0, 2, 1};
    check("embedding",
          [seed, ids](const Leaves& l) { return weighted_sum(embedding(l[0], ids), seed); },
          {random_tensor({3, 4}, rng)});
    std::vector<std::int32_t> targets{1, 4, 0};
    check("cross_entropy",
          [targets](const Leaves& l) { return cross_entropy(l[0], targets); },
          {random_tensor({3, 5}, rng, 2.0)});
    HeadLayout layout{2, 3, 2, 4};
    check("rope",
          [seed, layout](const Leaves& l) { return weighted_sum(rope(l[0], layout, 10000.0), seed); },
          {random_tensor({6, 8}, rng)});
    check("attention",
          [seed, layout](const Leaves& l) {
            return weighted_sum(causal_attention(l[0], l[1], l[2], layout, 2), seed);
          },
          {random_tensor({6, 8}, rng), random_tensor({6, 8}, rng), random_tensor({6, 8}, rng)});
    check("attention_gqa",
          [seed, layout](const Leaves& l) {
            return weighted_sum(causal_attention(l[0], l[1], l[2], layout, 1), seed);
          },
          {random_tensor({6, 8}, rng), random_tensor({6, 4}, rng), random_tensor({6, 4}, rng)});
  }
}

TEST(Attention, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(5);
  HeadLayout layout{2, 7, 4, 2};
  auto q = random_tensor({14, 8}, rng, 3.0);
  auto k = random_tensor({14, 4}, rng, 3.0);
  auto probs = causal_attention_probs<double>(q.data(), k.data(), layout, 2);
  for (std::size_t row = 0; row < 2 * 4 * 7; ++row) {
    const std::size_t s = row % 7;
    double total = 0;
    for (std::size_t t = 0; t < 7; ++t) {
      if (t > s) EXPECT_EQ(probs[row * 7 + t], 0.0);
      total += probs[row * 7 + t];
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(Ops, FiniteOnLargeMagnitudeInputs) {
  auto x = Tensor<float>::from({1, 4}, {1e4f, -1e4f, 0.5f, -3.0f});
  auto g = Tensor<float>::from({4}, {1, 1, 1, 1});
  EXPECT_TRUE(silu(x).all_finite());
  EXPECT_TRUE(softmax(x).all_finite());
  EXPECT_TRUE(rms_norm(x, g, 1e-6f).all_finite());
  std::vector<std::int32_t> t{1};
  EXPECT_TRUE(std::isfinite(cross_entropy(x, t).item()));
}

TEST(AdamW, ZeroGradientWithoutDecayOnlyAdvancesStep) {
  auto p = Tensor<double>::from({3}, {1.0, -2.0, 0.25}, true);
  p.mutable_grad();
  AdamWHyper hyper;
  hyper.weight_decay = 0.0;
  AdamW<double> opt({{"p", p}}, hyper);
  opt.step();
  EXPECT_EQ(p.values(), (std::vector<double>{1.0, -2.0, 0.25}));
  EXPECT_EQ(opt.state().step, 1u);
}

TEST(AdamW, FirstStepIsLrTimesSign) {
  const double lr = 1e-3, g = -0.37, start = 0.8;
  auto p = Tensor<double>::from({1}, {start}, true);
  p.mutable_grad()[0] = g;
  AdamWHyper hyper;
  hyper.lr = lr;
  hyper.weight_decay = 0.0;
  AdamW<double> opt({{"p", p}}, hyper);
  opt.step();
  // m = 0.1 g, v = 0.001 g^2; corrected m = g, corrected v = g^2.
  const double m_hat = (0.1 * g) / 0.1, v_hat = (0.001 * g * g) / 0.001;
  const double oracle = start - lr * m_hat / (std::sqrt(v_hat) + 1e-8);
  EXPECT_NEAR(p.data()[0], oracle, 1e-6);
  EXPECT_NEAR(p.data()[0] - start, lr, 1e-6);  // -lr * sign(g)
}

TEST(AdamW, DecayOnlyUpdate) {
  auto p = Tensor<double>::from({2}, {2.0, -4.0}, true);
  p.mutable_grad();
  AdamWHyper hyper;
  hyper.lr = 5e-5;
  hyper.weight_decay = 0.1;
  AdamW<double> opt({{"p", p}}, hyper);
  opt.step();
  EXPECT_DOUBLE_EQ(p.data()[0], 2.0 * (1 - 5e-6));
  EXPECT_DOUBLE_EQ(p.data()[1], -4.0 * (1 - 5e-6));
}

TEST(AdamW, NanGradientNamesParameter) {
  auto a = Tensor<float>::from({1}, {1.0f}, true);
  auto b = Tensor<float>::from({2}, {1.0f, 2.0f}, true);
  a.mutable_grad();
  b.mutable_grad()[1] = std::nanf("");
  AdamW<float> opt({{"layers.0.wq", a}, {"layers.1.wk", b}}, AdamWHyper{});
  try {
    opt.step();
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.parameter(), "layers.1.wk");
  }
  EXPECT_EQ(opt.state().step, 0u);
  EXPECT_EQ(b.data()[0], 1.0f);
}

TEST(AdamW, SecondMomentStaysNonNegative) {
  std::mt19937_64 rng(11);
  auto p = random_tensor({16}, rng);
  p.set_requires_grad(true);
  AdamW<double> opt({{"p", p}}, AdamWHyper{});
  for (int s = 0; s < 20; ++s) {
    opt.zero_grad();
    sum(mul(p, p)).backward();
    opt.step(1e-2);
    for (double v : opt.state().v[0]) EXPECT_GE(v, 0.0);
  }
  EXPECT_EQ(opt.state().step, 20u);
}

TEST(AdamW, ClipGradNorm) {
  auto p = Tensor<double>::from({2}, {0, 0}, true);
  p.mutable_grad()[0] = 3;
  p.mutable_grad()[1] = 4;
  AdamW<double> opt({{"p", p}}, AdamWHyper{});
  EXPECT_DOUBLE_EQ(opt.clip_grad_norm(1.0), 5.0);
  EXPECT_NEAR(p.grad()[0], 0.6, 1e-12);
  EXPECT_NEAR(p.grad()[1], 0.8, 1e-12);
}
