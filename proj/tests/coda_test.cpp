// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The coda-prompt authors.

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "test_util.hpp"

namespace coda {
namespace {

using test::loop_cosine;
using test::random_tensor;

PromptBank make_bank(std::size_t m, std::size_t lp, std::size_t d,
                     std::uint64_t seed, bool attention = true) {
  BankConfig c;
  c.components = m;
  c.prompt_length = lp;
  c.attention = attention;
  return PromptBank(c, {0, 2}, d, seed);
}

std::vector<double> row(const Tensor& t, std::size_t i) {
  return {t.row(i).begin(), t.row(i).end()};
}

std::vector<double> hadamard(std::span<const double> a, std::span<const double> b) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

TEST(WeightAlpha, AllOnesAttentionReducesToPlainCosine) {
  PromptBank bank = make_bank(5, 2, 6, 1);
  auto& s = bank.at(0);
  s.attention = Tensor(s.attention.shape(), 1.0);
  const Tensor q = random_tensor({6}, 2);
  const Tensor alpha = weight_alpha(q, bank, 0);
  for (std::size_t m = 0; m < 5; ++m) {
    EXPECT_NEAR(alpha[m], loop_cosine(q.data(), row(s.keys, m)), 1e-12);
  }
}

TEST(WeightAlpha, AttentionOffEqualsAllOnesAttention) {
  PromptBank on = make_bank(5, 2, 6, 3);
  PromptBank off = make_bank(5, 2, 6, 3, /*attention=*/false);
  for (std::size_t layer : {0, 2}) {
    on.at(layer).attention = Tensor(on.at(layer).attention.shape(), 1.0);
  }
  const Tensor q = random_tensor({6}, 4);
  for (std::size_t layer : {0, 2}) {
    EXPECT_LT(max_abs_diff(weight_alpha(q, on, layer), weight_alpha(q, off, layer)), 1e-12);
  }
}

TEST(WeightAlpha, QueryEqualToKeyWithOnesAttentionGivesOne) {
  PromptBank bank = make_bank(4, 2, 6, 5);
  auto& s = bank.at(2);
  for (std::size_t j = 0; j < 6; ++j) s.attention(1, j) = 1.0;
  const Tensor q({6}, row(s.keys, 1));
  EXPECT_NEAR(weight_alpha(q, bank, 2)[1], 1.0, 1e-15);
}

TEST(WeightAlpha, MatchesScalarLoopOracle) {
  PromptBank bank = make_bank(5, 2, 6, 6);
  const Tensor q = random_tensor({6}, 7);
  const auto& s = bank.at(0);
  const Tensor alpha = weight_alpha(q, bank, 0);
  ASSERT_EQ(alpha.size(), 5u);
  for (std::size_t m = 0; m < 5; ++m) {
    const double want = loop_cosine(hadamard(q.data(), row(s.attention, m)), row(s.keys, m));
    EXPECT_NEAR(alpha[m], want, 1e-12);
  }
}

TEST(WeightAlpha, PropertyEntriesInCosineRange) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    PromptBank bank = make_bank(6, 2, 8, 100 + seed);
    const Tensor q = random_tensor({8}, 200 + seed, -5, 5);
    const Tensor alpha = weight_alpha(q, bank, 0);
    for (double a : alpha.data()) {
      EXPECT_GE(a, -1.0 - 1e-12);
      EXPECT_LE(a, 1.0 + 1e-12);
    }
  }
}

TEST(WeightAlpha, MaskFutureZeroesUnreachedComponents) {
  BankConfig c;
  c.components = 6;
  c.prompt_length = 2;
  c.mask_future = true;
  PromptBank bank(c, {0}, 4, 8);
  bank.expand(1, 3);
  const Tensor alpha = weight_alpha(random_tensor({4}, 9), bank, 0);
  for (std::size_t m = 2; m < 6; ++m) EXPECT_EQ(alpha[m], 0.0);
  EXPECT_NE(alpha[0], 0.0);
}

TEST(AssemblePrompt, OneHotSelectsComponentExactly) {
  PromptBank bank = make_bank(4, 4, 6, 10);
  for (std::size_t m = 0; m < 4; ++m) {
    Tensor alpha({4});
    alpha[m] = 1.0;
    const Tensor p = assemble_prompt(alpha, bank, 2);
    const auto& P = bank.at(2).prompts;
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(p(r, j), P(m, r, j));
  }
}

TEST(AssemblePrompt, ZeroWeightsGiveZeroPrompt) {
  PromptBank bank = make_bank(4, 2, 6, 11);
  const Tensor p = assemble_prompt(Tensor({4}), bank, 0);
  for (double v : p.data()) EXPECT_EQ(v, 0.0);
}

TEST(AssemblePrompt, MatchesAccumulationLoop) {
  PromptBank bank = make_bank(4, 2, 6, 12);
  const Tensor alpha = random_tensor({4}, 13);
  const Tensor p = assemble_prompt(alpha, bank, 0);
  const auto& P = bank.at(0).prompts;
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t j = 0; j < 6; ++j) {
      double acc = 0;
      for (std::size_t m = 0; m < 4; ++m) acc += alpha[m] * P(m, r, j);
      EXPECT_NEAR(p(r, j), acc, 1e-12);
    }
}

TEST(AssemblePrompt, LengthMismatchIsDimensionError) {
  PromptBank bank = make_bank(4, 2, 6, 14);
  EXPECT_THROW(assemble_prompt(Tensor({3}), bank, 0), DimensionError);
}

// With A all ones and alpha hardened to a one-hot at its argmax, the
// assembled prompt is the prompt a hard key-query selection would return.
TEST(AssemblePrompt, PropertyGeneralizesHardSelection) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    PromptBank bank = make_bank(6, 2, 8, 300 + seed, /*attention=*/false);
    const Tensor q = random_tensor({8}, 400 + seed);
    const Tensor alpha = weight_alpha(q, bank, 0);
    const auto best = static_cast<std::size_t>(
        std::max_element(alpha.data().begin(), alpha.data().end()) - alpha.data().begin());
    Tensor hard({6});
    hard[best] = 1.0;
    const auto& s = bank.at(0);
    const auto sel = pool_topk_select(q, s.keys, s.prompts, 1);
    ASSERT_EQ(sel.indices.front(), best);
    EXPECT_TRUE(bitwise_equal(assemble_prompt(hard, bank, 0), sel.prompt));
  }
}

TEST(OrthoLoss, OrthonormalRowsGiveZero) {
  // Rows of a rotation matrix plus a permuted identity.
  const double c = std::cos(0.3), s = std::sin(0.3);
  EXPECT_LE(ortho_loss(Tensor({2, 2}, {c, -s, s, c})), 1e-9);
  EXPECT_LE(ortho_loss(Tensor({3, 4}, {0, 0, 1, 0, 1, 0, 0, 0, 0, 0, 0, 1})), 1e-9);
}

TEST(OrthoLoss, TwiceIdentity) {
  for (std::size_t r : {1, 4, 7}) {
    Tensor b = Tensor::identity(r);
    for (double& v : b.data()) v *= 2.0;
    // ||4I - I||_F = 3 sqrt(R).
    EXPECT_NEAR(ortho_loss(b), 3.0 * std::sqrt(static_cast<double>(r)), 1e-12) << r;
  }
}

TEST(OrthoLoss, MatchesLoopOracle) {
  const Tensor b = random_tensor({4, 6}, 15);
  double ss = 0;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      double g = (i == j) ? -1.0 : 0.0;
      for (std::size_t k = 0; k < 6; ++k) g += b(i, k) * b(j, k);
      ss += g * g;
    }
  EXPECT_NEAR(ortho_loss(b), std::sqrt(ss), 1e-12);
}

TEST(OrthoLoss, PropertyPositiveUnlessOrthonormal) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    EXPECT_GT(ortho_loss(random_tensor({3, 5}, 500 + seed)), 1e-3);
  }
}

TEST(OrthoPenalty, SumsPKAOverLayersWithFlattenedPrompts) {
  PromptBank bank = make_bank(4, 2, 6, 16);
  Tape t;
  const double got = bank.ortho_penalty(t, bank.bind(t)).value().item();
  double want = 0;
  for (std::size_t layer : {0, 2}) {
    const auto& s = bank.at(layer);
    want += ortho_loss(s.prompts.reshaped({4, 12})) + ortho_loss(s.keys) +
            ortho_loss(s.attention);
  }
  EXPECT_NEAR(got, want, 1e-12);

  PromptBank off = make_bank(4, 2, 6, 16, false);
  Tape t2;
  double want_off = 0;
  for (std::size_t layer : {0, 2}) {
    const auto& s = off.at(layer);
    want_off += ortho_loss(s.prompts.reshaped({4, 12})) + ortho_loss(s.keys);
  }
  EXPECT_NEAR(off.ortho_penalty(t2, off.bind(t2)).value().item(), want_off, 1e-12);
}

TEST(Expand, ScheduleArithmetic) {
  BankConfig c;
  c.components = 100;
  c.prompt_length = 2;
  PromptBank bank(c, {0}, 4, 17);
  bank.expand(1, 10);
  EXPECT_EQ(bank.frozen_count(), 0u);
  EXPECT_EQ(bank.trainable_range(), (ComponentRange{0, 10}));
  bank.expand(3, 10);
  EXPECT_EQ(bank.frozen_count(), 20u);
  EXPECT_EQ(bank.trainable_range(), (ComponentRange{20, 30}));
  ASSERT_EQ(bank.task_schedule().size(), 10u);
  EXPECT_EQ(bank.task_schedule()[9], (ComponentRange{90, 100}));
}

TEST(Expand, InvalidInputsAreConfigErrors) {
  BankConfig c;
  c.components = 10;
  c.prompt_length = 2;
  PromptBank bank(c, {0}, 4, 18);
  EXPECT_THROW(bank.expand(1, 3), ConfigError);
  EXPECT_THROW(bank.expand(0, 5), ConfigError);
  EXPECT_THROW(bank.expand(6, 5), ConfigError);
  EXPECT_EQ(c.violations(3).size(), 1u);
}

TEST(Expand, FreezingOffKeepsEverythingReachedTrainable) {
  BankConfig c;
  c.components = 6;
  c.prompt_length = 2;
  c.freezing = false;
  PromptBank bank(c, {0}, 4, 19);
  bank.expand(3, 3);
  EXPECT_EQ(bank.trainable_range(), (ComponentRange{0, 6}));
}

TEST(Expand, TrainableSlotsCoverOnlyTheCurrentRange) {
  PromptBank bank = make_bank(6, 2, 4, 20);
  bank.expand(2, 3);
  const auto slots = bank.trainable_slots();
  ASSERT_EQ(slots.size(), 6u);
  for (const auto& s : slots) {
    EXPECT_EQ(s.row_begin, 2u);
    EXPECT_EQ(s.row_end, 4u);
  }
}

TEST(ExpansionInvariance, ChangingNewComponentsKeepsFrozenWeights) {
  PromptBank before = make_bank(6, 2, 8, 21);
  before.expand(2, 3);  // frozen_count = 2
  PromptBank after = before;
  Rng rng(22);
  for (std::size_t layer : {0, 2}) {
    auto& s = after.at(layer);
    for (Tensor* t : {&s.prompts, &s.keys, &s.attention}) {
      const std::size_t r = t->row_size();
      for (std::size_t i = 2 * r; i < t->size(); ++i) (*t)[i] += rng.uniform(-1, 1);
    }
  }
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    EXPECT_TRUE(alpha_expansion_invariance_check(before, after, random_tensor({8}, 600 + seed)));
  }
}

TEST(ExpansionInvariance, ChangingAFrozenKeyIsDetected) {
  PromptBank before = make_bank(6, 2, 8, 23);
  before.expand(2, 3);
  PromptBank after = before;
  after.at(0).keys(1, 3) += 0.5;
  EXPECT_FALSE(alpha_expansion_invariance_check(before, after, random_tensor({8}, 24)));
}

TEST(PoolTopK, SinglePromptPool) {
  const Tensor keys = random_tensor({1, 4}, 25), prompts = random_tensor({1, 2, 4}, 26);
  const auto sel = pool_topk_select(random_tensor({4}, 27), keys, prompts, 1);
  EXPECT_EQ(sel.indices, std::vector<std::size_t>{0});
  EXPECT_TRUE(bitwise_equal(sel.prompt, prompts.reshaped({2, 4})));
}

TEST(PoolTopK, MatchingKeyRanksFirst) {
  const Tensor keys = Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const auto sel = pool_topk_select(Tensor::vector({0, 2, 0}), keys, random_tensor({3, 2, 3}, 28), 2);
  EXPECT_EQ(sel.indices.front(), 1u);
}

TEST(PoolTopK, IndicesMatchExhaustiveSort) {
  const Tensor keys = random_tensor({8, 5}, 29), prompts = random_tensor({8, 4, 5}, 30);
  const Tensor q = random_tensor({5}, 31);
  const auto sel = pool_topk_select(q, keys, prompts, 3);
  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t i = 0; i < 8; ++i) all.push_back({-loop_cosine(q.data(), row(keys, i)), i});
  std::sort(all.begin(), all.end());
  for (std::size_t r = 0; r < 3; ++r) EXPECT_EQ(sel.indices[r], all[r].second);
  // Key halves of the selected prompts in rank order, then value halves.
  ASSERT_EQ(sel.prompt.shape(), (Shape{12, 5}));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t j = 0; j < 5; ++j) {
        EXPECT_EQ(sel.prompt(r * 2 + h, j), prompts(sel.indices[r], h, j));
        EXPECT_EQ(sel.prompt(6 + r * 2 + h, j), prompts(sel.indices[r], 2 + h, j));
      }
}

TEST(PoolTopK, EmptyPoolIsError) {
  EXPECT_THROW(pool_topk_select(Tensor({4}), Tensor({0, 4}), Tensor({0, 2, 4}), 1), ConfigError);
}

TEST(PoolStrategy, BatchedPrefixMatchesSingleSelection) {
  PoolConfig pc{6, 2, 4, 0.5};
  PoolStrategy pool(pc, {0, 1}, 5, 32);
  const Tensor queries = random_tensor({3, 5}, 33);
  Tape t;
  const Prompting pr = pool.prompt(t, queries, std::nullopt);
  EXPECT_FALSE(pr.aux_loss.has_value());
  const Tensor batched = pr.prompts.at(1).value();
  ASSERT_EQ(batched.shape(), (Shape{3, 8, 5}));
  for (std::size_t b = 0; b < 3; ++b) {
    const Tensor q({5}, row(queries, b));
    const auto sel = pool_topk_select(q, pool.keys(), pool.prompts(1), 2);
    for (std::size_t i = 0; i < sel.prompt.size(); ++i) {
      EXPECT_EQ(batched[b * sel.prompt.size() + i], sel.prompt[i]);
    }
  }
}

TEST(KeyPullLoss, ClosedFormValues) {
  const Tensor q = Tensor::vector({1, 0});
  EXPECT_NEAR(key_pull_loss(q, Tensor({1, 2}, {1, 0})), 0.0, 1e-15);
  EXPECT_NEAR(key_pull_loss(q, Tensor({1, 2}, {0, 1})), 1.0, 1e-15);
  EXPECT_NEAR(key_pull_loss(q, Tensor({2, 2}, {3, 0, 0, 2})), 0.5, 1e-15);
}

TEST(KeyPullLoss, GradientReachesKeysOnly) {
  Tensor q = random_tensor({3, 4}, 34), k = random_tensor({3, 4}, 35);
  q.set_requires_grad(true);
  k.set_requires_grad(true);
  Tape t;
  Var loss = key_pull_loss(t.constant(q), t.leaf(k));
  t.backward(loss);
  EXPECT_FALSE(q.grad().has_value());
  ASSERT_TRUE(k.grad().has_value());

  PoolStrategy pool(PoolConfig{4, 2, 2, 0.5}, {0}, 8, 36);
  ViTEncoder enc(test::micro_encoder(), 37);
  enc.freeze();
  const Tensor queries = enc.query(random_tensor({2, 64}, 38));
  Tape t2;
  Prompting pr = pool.prompt(t2, queries, 0);
  ASSERT_TRUE(pr.aux_loss.has_value());
  t2.backward(*pr.aux_loss);
  for (auto& [name, p] : enc.named_parameters()) EXPECT_FALSE(p->grad().has_value()) << name;
}

TEST(PerTask, TrainingSelectsByTaskId) {
  const Tensor prompts = random_tensor({4, 2, 3}, 39);
  const Tensor p = per_task_select(2, prompts);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(p[i], prompts[12 + i]);
  EXPECT_THROW(per_task_select(4, prompts), ConfigError);
}

TEST(PerTask, InferenceSelectsClosestKey) {
  const Tensor keys = random_tensor({4, 5}, 40), prompts = random_tensor({4, 2, 5}, 41);
  const Tensor q0({5}, row(keys, 0));
  EXPECT_TRUE(bitwise_equal(per_task_select(q0, prompts, keys), per_task_select(0, prompts)));
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor q = random_tensor({5}, 700 + seed);
    std::size_t best = 0;
    for (std::size_t i = 1; i < 4; ++i) {
      if (loop_cosine(q.data(), row(keys, i)) > loop_cosine(q.data(), row(keys, best))) best = i;
    }
    EXPECT_TRUE(bitwise_equal(per_task_select(q, prompts, keys), per_task_select(best, prompts)));
  }
}

TEST(PerTask, InferenceOnlyConsidersSeenTasks) {
  PerTaskStrategy s(PerTaskConfig{2, 0.5}, {0}, 4, 3, 42);
  s.begin_task(0, 3);
  // A query equal to an unseen task's key still maps to task 0.
  const Tensor q = s.keys().reshaped({3, 4});
  Tape t;
  const Tensor got = s.prompt(t, gather_rows(q, std::vector<std::size_t>{2}), std::nullopt)
                         .prompts.at(0)
                         .value();
  Tensor want = s.named_parameters()[1].second->reshaped({3, 2, 4});
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(got[i], want[i]);
}

TEST(Strategies, CodaAuxLossOnlyWhenTrainingWithPositiveLambda) {
  BankConfig c;
  c.components = 4;
  c.prompt_length = 2;
  CodaStrategy coda(c, {0, 1}, 8, 43);
  coda.begin_task(0, 2);
  const Tensor q = random_tensor({2, 8}, 44);
  Tape t;
  EXPECT_TRUE(coda.prompt(t, q, 0).aux_loss.has_value());
  EXPECT_FALSE(coda.prompt(t, q, std::nullopt).aux_loss.has_value());
  c.ortho_weight = 0.0;
  CodaStrategy plain(c, {0, 1}, 8, 43);
  plain.begin_task(0, 2);
  EXPECT_FALSE(plain.prompt(t, q, 0).aux_loss.has_value());
}

TEST(Strategies, CodaParameterCountClosedForm) {
  BankConfig c;
  c.components = 10;
  c.prompt_length = 4;
  CodaStrategy coda(c, {0, 1, 2}, 8, 45);
  EXPECT_EQ(coda.parameter_count(), 3u * (10 * 4 * 8 + 2 * 10 * 8));
  std::size_t introspected = 0;
  for (auto& [name, t] : coda.named_parameters()) introspected += t->size();
  EXPECT_EQ(coda.parameter_count(), introspected);
}

// Every P, K, A entry of the full objective, plus the head.
TEST(FullObjective, GradientMatchesFiniteDifferences) {
  bool found = false;
  for (const auto& e : run_gradient_suite()) {
    if (e.name != "full_objective") continue;
    found = true;
    EXPECT_LT(e.result.max_rel_error, 1e-4);
    // 2 layers of P [6x4x8], K and A [6x8], plus a 4x8 head and its bias.
    EXPECT_EQ(e.result.checked, 2u * (6 * 4 * 8 + 2 * 6 * 8) + 4 * 8 + 4);
  }
  EXPECT_TRUE(found);
}

}  // namespace
}  // namespace coda
