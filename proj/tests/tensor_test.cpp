// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The coda-prompt authors.

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "test_util.hpp"

namespace coda {
namespace {

using test::random_tensor;

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tape t;
  Var c = matmul(t.constant(Tensor::identity(2)),
                 t.constant(Tensor({2, 2}, {1, 2, 3, 4})));
  EXPECT_TRUE(bitwise_equal(c.value(), Tensor({2, 2}, {1, 2, 3, 4})));
}

TEST(Matmul, ZeroOperandGivesZero) {
  Tape t;
  Var c = matmul(t.constant(Tensor::identity(2)), t.constant(Tensor::zeros({2, 2})));
  EXPECT_TRUE(bitwise_equal(c.value(), Tensor::zeros({2, 2})));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape t;
  try {
    matmul(t.constant(Tensor({3, 4})), t.constant(Tensor({3, 2})));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[3x4]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[3x2]"), std::string::npos) << msg;
  }
}

TEST(Matmul, MatchesLoopProduct) {
  Tensor a = random_tensor({3, 4}, 1), b = random_tensor({4, 2}, 2);
  Tape t;
  Var c = matmul(t.constant(a), t.constant(b));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 4; ++k) s += a(i, k) * b(k, j);
      EXPECT_NEAR(c.value()(i, j), s, 1e-14);
    }
}

TEST(Matmul, SumGradientMatchesFiniteDifferences) {
  Tensor a = random_tensor({3, 4}, 3), b = random_tensor({4, 2}, 4);
  auto r = grad_check([&](Tape& t) { return sum(matmul(t.leaf(a), t.leaf(b))); },
                      {&a, &b});
  EXPECT_LT(r.max_rel_error, 1e-6);
  EXPECT_EQ(r.checked, a.size() + b.size());
}

TEST(Matmul, BackwardIsTransposedProducts) {
  Tensor a = random_tensor({3, 4}, 5), b = random_tensor({4, 2}, 6);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  Tape t;
  t.backward(sum(matmul(t.leaf(a), t.leaf(b))));
  // dC is all ones: dA[i][k] = sum_j B[k][j], dB[k][j] = sum_i A[i][k].
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k)
      EXPECT_NEAR((*a.grad())[i * 4 + k], b(k, 0) + b(k, 1), 1e-14);
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t j = 0; j < 2; ++j)
      EXPECT_NEAR((*b.grad())[k * 2 + j], a(0, k) + a(1, k) + a(2, k), 1e-14);
}

TEST(Softmax, UniformOnEqualInputs) {
  Tape t;
  Var y = softmax(t.constant(Tensor::vector({0, 0, 0})), 0);
  for (double v : y.value().data()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Softmax, NegativeInfinityGetsZeroProbability) {
  Tape t;
  const double ninf = -std::numeric_limits<double>::infinity();
  Var y = softmax(t.constant(Tensor::vector({ninf, 0})), 0);
  EXPECT_EQ(y.value()[0], 0.0);
  EXPECT_EQ(y.value()[1], 1.0);
}

TEST(Softmax, AllMaskedSliceIsNumericError) {
  Tape t;
  const double ninf = -std::numeric_limits<double>::infinity();
  EXPECT_THROW(softmax(t.constant(Tensor::vector({ninf, ninf})), 0), NumericError);
}

TEST(Softmax, MatchesDirectExpOverSum) {
  Tape t;
  Var y = softmax(t.constant(Tensor::vector({1, 2, 3})), 0);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(y.value()[i], std::exp(i + 1.0) / z, 1e-12);
}

TEST(Softmax, PropertyNonNegativeAndSumsToOne) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tensor x = random_tensor({3, 5, 4}, 100 + seed, -10, 10);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      Tape t;
      const Tensor y = softmax(t.constant(x), axis).value();
      const Shape& s = x.shape();
      std::size_t outer = 1, inner = 1;
      for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
      for (std::size_t i = axis + 1; i < 3; ++i) inner *= s[i];
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          double total = 0;
          for (std::size_t j = 0; j < s[axis]; ++j) {
            const double p = y[(o * s[axis] + j) * inner + in];
            EXPECT_GE(p, 0.0);
            total += p;
          }
          EXPECT_NEAR(total, 1.0, 1e-12);
        }
    }
  }
}

TEST(Cosine, KnownValues) {
  Tape t;
  auto cos = [&](Tensor u, Tensor v) {
    return cosine_sim(t.constant(std::move(u)), t.constant(std::move(v))).value().item();
  };
  EXPECT_DOUBLE_EQ(cos(Tensor::vector({1, 0}), Tensor::vector({1, 0})), 1.0);
  EXPECT_DOUBLE_EQ(cos(Tensor::vector({1, 0}), Tensor::vector({0, 1})), 0.0);
  EXPECT_NEAR(cos(Tensor::vector({1, 1}), Tensor::vector({1, 0})), 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_EQ(cos(Tensor::vector({0, 0}), Tensor::vector({1, 0})), 0.0);
}

TEST(Cosine, PropertySymmetricAndScaleInvariant) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Tensor u = random_tensor({7}, 200 + seed), v = random_tensor({7}, 300 + seed);
    Rng rng(seed);
    const double c = rng.uniform(0.01, 100.0);
    Tensor cu = u;
    for (double& x : cu.data()) x *= c;
    Tape t;
    const double uv = cosine_sim(t.constant(u), t.constant(v)).value().item();
    const double vu = cosine_sim(t.constant(v), t.constant(u)).value().item();
    const double cuv = cosine_sim(t.constant(cu), t.constant(v)).value().item();
    EXPECT_NEAR(uv, vu, 1e-12);
    EXPECT_NEAR(uv, cuv, 1e-12);
    EXPECT_LE(std::abs(uv), 1.0 + 1e-12);
    EXPECT_NEAR(uv, test::loop_cosine(u.data(), v.data()), 1e-12);
  }
}

TEST(Primitives, LayernormOfConstantIsZero) {
  Tape t;
  Var y = layernorm(t.constant(Tensor({2, 5}, 3.25)));
  for (double v : y.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Primitives, GeluAtZero) {
  Tape t;
  EXPECT_EQ(gelu(t.constant(Tensor::vector({0}))).value()[0], 0.0);
}

TEST(Primitives, FrobeniusNormOfScaledIdentity) {
  Tensor x = Tensor::identity(4);
  for (double& v : x.data()) v *= 3.0;
  Tape t;
  // Closed form: sqrt(4 * 3^2).
  EXPECT_NEAR(frobenius_norm(t.constant(x)).value().item(), 3.0 * std::sqrt(4.0), 1e-14);
}

TEST(Primitives, ConcatSliceRoundTrip) {
  Tensor a = random_tensor({2, 3}, 7), b = random_tensor({2, 2}, 8);
  Tape t;
  Var c = concat({t.constant(a), t.constant(b)}, 1);
  ASSERT_EQ(c.shape(), (Shape{2, 5}));
  EXPECT_TRUE(bitwise_equal(slice(c, 1, 0, 3).value(), a));
  EXPECT_TRUE(bitwise_equal(slice(c, 1, 3, 5).value(), b));
}

TEST(Primitives, AddShapeMismatchIsDimensionError) {
  Tape t;
  EXPECT_THROW(t.constant(Tensor({2, 3})) + t.constant(Tensor({3, 2})), DimensionError);
  EXPECT_THROW(concat({t.constant(Tensor({2, 3})), t.constant(Tensor({3, 3}))}, 1),
               DimensionError);
}

TEST(Primitives, MeanMatchesSumOverCount) {
  Tensor x = random_tensor({3, 4}, 9);
  double s = 0;
  for (double v : x.data()) s += v;
  Tape t;
  EXPECT_NEAR(mean(t.constant(x)).value().item(), s / 12.0, 1e-15);
}

TEST(Primitives, PermuteMatchesIndexArithmetic) {
  Tensor x = random_tensor({2, 3, 4}, 10);
  Tape t;
  const Tensor y = permute(t.constant(x), {2, 0, 1}).value();
  ASSERT_EQ(y.shape(), (Shape{4, 2, 3}));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(y(k, i, j), x(i, j, k));
}

TEST(Autograd, NoGradientForTensorsWithoutRequiresGrad) {
  Tensor a = random_tensor({3, 3}, 11), b = random_tensor({3, 3}, 12);
  b.set_requires_grad(true);
  Tape t;
  t.backward(sum(matmul(t.leaf(a), t.leaf(b))));
  EXPECT_FALSE(a.grad().has_value());
  EXPECT_TRUE(b.grad().has_value());
}

TEST(Autograd, GradientsAccumulateAcrossBackwardCalls) {
  Tensor a = random_tensor({4}, 13);
  a.set_requires_grad(true);
  for (int rep = 0; rep < 2; ++rep) {
    Tape t;
    t.backward(sum(t.leaf(a)));
  }
  for (double g : *a.grad()) EXPECT_EQ(g, 2.0);
}

TEST(GradCheck, OrthoLossWithinTolerance) {
  Tensor b = random_tensor({5, 7}, 14);
  auto r = grad_check([&](Tape& t) { return ortho_loss(t.leaf(b)); }, {&b});
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(GradCheck, NonFiniteValueIsNumericError) {
  Tensor a = Tensor::vector({1.0, std::numeric_limits<double>::quiet_NaN()});
  EXPECT_THROW(grad_check([&](Tape& t) { return sum(t.leaf(a)); }, {&a}), NumericError);
}

TEST(GradCheck, DetectsAWrongGradient) {
  // A hand-built node whose backward is off by a factor of two.
  Tensor a = random_tensor({3}, 15);
  auto r = grad_check(
      [&](Tape& t) {
        Var x = t.leaf(a);
        return t.record(Tensor::scalar(a[0] * a[0]), {x},
                        [x](Tape& tp, std::span<const double> g) {
                          tp.grad(x)[0] += 4.0 * x.value()[0] * g[0];
                        });
      },
      {&a});
  EXPECT_GT(r.max_rel_error, 0.1);
}

// Property: every primitive in the suite matches central differences on
// random inputs in [-1, 1].
TEST(GradCheck, PrimitiveSuiteWithinTolerance) {
  for (const auto& e : run_gradient_suite()) {
    EXPECT_LT(e.result.max_rel_error, 1e-5) << e.name;
    EXPECT_GT(e.result.checked, 0u) << e.name;
  }
}

}  // namespace
}  // namespace coda
