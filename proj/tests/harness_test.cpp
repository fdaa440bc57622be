// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The coda-prompt authors.

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "test_util.hpp"

namespace coda {
namespace {

using test::micro_config;
using test::micro_encoder;
using test::random_tensor;

// ---------------------------------------------------------------------------
// Metric oracles

double brute_avg_accuracy(const std::vector<std::vector<double>>& a,
                          const std::vector<double>& w) {
  double total = 0;
  for (std::size_t t = 0; t < a.size(); ++t) {
    double num = 0, den = 0;
    for (std::size_t j = 0; j <= t; ++j) {
      num += w[j] * a[t][j];
      den += w[j];
    }
    total += num / den;
  }
  return total / static_cast<double>(a.size());
}

double brute_forgetting(const std::vector<std::vector<double>>& a) {
  const std::size_t n = a.size();
  double total = 0;
  for (std::size_t j = 0; j + 1 < n; ++j) {
    double best = -1;
    for (std::size_t t = j; t < n; ++t) best = std::max(best, a[t][j]);
    total += best - a[n - 1][j];
  }
  return total / static_cast<double>(n - 1);
}

AccuracyMatrix random_matrix(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  AccuracyMatrix m;
  m.num_tasks = n;
  for (std::size_t t = 0; t < n; ++t) {
    m.weights.push_back(static_cast<double>(1 + rng.below(50)));
    std::vector<double> row;
    for (std::size_t j = 0; j <= t; ++j) row.push_back(rng.uniform());
    m.add_row(row);
  }
  return m;
}

TEST(Metrics, AverageAccuracyWorkedExample) {
  EXPECT_DOUBLE_EQ(avg_accuracy(std::vector<double>{0.9, 0.7}), 0.8);
  AccuracyMatrix one;
  one.num_tasks = 1;
  one.add_row({0.65});
  EXPECT_EQ(avg_accuracy(one), 0.65);
}

TEST(Metrics, SeenAccuracyIsClassWeighted) {
  AccuracyMatrix m;
  m.num_tasks = 2;
  m.weights = {10, 30};
  m.add_row({1.0});
  m.add_row({0.5, 0.9});
  EXPECT_NEAR(m.seen_accuracy(1), (10 * 0.5 + 30 * 0.9) / 40.0, 1e-15);
}

TEST(Metrics, AverageAccuracyMatchesRecomputation) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto m = random_matrix(3, seed);
    EXPECT_NEAR(avg_accuracy(m), brute_avg_accuracy(m.a, m.weights), 1e-12);
  }
}

TEST(Metrics, ForgettingWorkedExamples) {
  AccuracyMatrix m;
  m.num_tasks = 2;
  m.add_row({0.9});
  m.add_row({0.8, 0.6});
  EXPECT_NEAR(*avg_forgetting(m), 0.1, 1e-15);

  AccuracyMatrix flat;
  flat.num_tasks = 3;
  flat.add_row({0.5});
  flat.add_row({0.6, 0.7});
  flat.add_row({0.6, 0.7, 0.2});
  EXPECT_EQ(*avg_forgetting(flat), 0.0);
}

TEST(Metrics, ForgettingMatchesBruteForce) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto m = random_matrix(4, 100 + seed);
    EXPECT_NEAR(*avg_forgetting(m), brute_forgetting(m.a), 1e-12);
  }
}

TEST(Metrics, UndefinedCases) {
  AccuracyMatrix one;
  one.num_tasks = 1;
  one.add_row({0.4});
  EXPECT_FALSE(avg_forgetting(one).has_value());
  AccuracyMatrix partial;
  partial.num_tasks = 3;
  partial.add_row({0.4});
  EXPECT_THROW(avg_accuracy(partial), StateError);
  EXPECT_THROW(partial.add_row({0.1}), DimensionError);
}

TEST(Metrics, MeanAndSampleStd) {
  const auto s = mean_std({1.0, 2.0, 4.0});
  EXPECT_NEAR(s.mean, 7.0 / 3.0, 1e-15);
  const double var = (std::pow(1 - 7.0 / 3, 2) + std::pow(2 - 7.0 / 3, 2) + std::pow(4 - 7.0 / 3, 2)) / 2;
  EXPECT_NEAR(s.std, std::sqrt(var), 1e-15);
  EXPECT_EQ(mean_std({0.3}).std, 0.0);
}

// ---------------------------------------------------------------------------
// Masking

TEST(Masking, PastLogitsBecomeNegativeInfinity) {
  const Tensor masked = mask_past_logits(Tensor({1, 4}, {5, 5, 1, 2}), 2, 4);
  const double ninf = -std::numeric_limits<double>::infinity();
  EXPECT_EQ(masked[0], ninf);
  EXPECT_EQ(masked[1], ninf);
  EXPECT_EQ(masked[2], 1.0);
  EXPECT_EQ(masked[3], 2.0);
  Tape t;
  const Tensor p = softmax(t.constant(masked), 1).value();
  EXPECT_EQ(p[0], 0.0);
  EXPECT_EQ(p[1], 0.0);
  EXPECT_THROW(mask_past_logits(Tensor({1, 4}), 2, 2), ConfigError);
}

TEST(Masking, PastHeadRowsGetExactlyZeroGradient) {
  ClassifierHead head(6);
  head.add_task(3, 1);
  head.add_task(3, 2);
  const Tensor features = random_tensor({5, 6}, 3);
  const std::vector<std::size_t> labels = {3, 4, 5, 3, 4};
  auto loss = [&](Tape& t) {
    return cross_entropy(mask_past_logits(head.forward(t, t.constant(features)), 3, 6), labels);
  };
  {
    Tape t;
    t.backward(loss(t));
  }
  EXPECT_EQ(head.grad_norm_below(3), 0.0);
  EXPECT_GT(head.grad_norm_below(6), 0.0);
  // Finite differences agree: perturbing a past row leaves the loss unchanged.
  Tape base;
  const double l0 = loss(base).value().item();
  head.weight()(1, 2) += 1e-3;
  head.bias()[0] -= 1e-3;
  Tape moved;
  EXPECT_EQ(loss(moved).value().item(), l0);
}

// ---------------------------------------------------------------------------
// Learners

struct MicroSetup {
  RunConfig config;
  TaskStream stream;
  ViTEncoder encoder;
  QueryCache queries;
};

MicroSetup micro_setup(const std::string& name) {
  MicroSetup s;
  s.config = micro_config(test::work_dir(name));
  s.config.checkpoints = false;
  s.stream = generate_benchmark(s.config.benchmark, 0);
  s.encoder = ViTEncoder(s.config.encoder, 5);
  s.encoder.freeze();
  s.queries = compute_queries(s.encoder, s.stream);
  return s;
}

TEST(Learner, LrZeroStepChangesNothing) {
  auto s = micro_setup("lr_zero");
  s.config.optim.lr = 0.0;
  for (StrategyKind kind : {StrategyKind::kCoda, StrategyKind::kPoolTopK, StrategyKind::kPerTask}) {
    Learner l = make_learner(kind, s.config, s.encoder, 0);
    Learner probe = make_learner(kind, s.config, s.encoder, 0);
    train_task(l, s.stream, 0, &s.queries.train[0], s.config.optim, 0);
    auto a = l.strategy->named_parameters();
    auto b = probe.strategy->named_parameters();
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_TRUE(bitwise_equal(*a[i].second, *b[i].second)) << a[i].first;
    }
    probe.head.add_task(2, derive_seed(0, Stream::kHeadInit, {0}));
    EXPECT_TRUE(bitwise_equal(l.head.weight(), probe.head.weight()));
    EXPECT_TRUE(bitwise_equal(l.head.bias(), probe.head.bias()));
  }
}

TEST(Learner, SeparableTwoClassTaskIsLearned) {
  RunConfig c = micro_config(test::work_dir("separable"));
  c.benchmark.num_classes = 2;
  c.benchmark.num_tasks = 1;
  c.benchmark.train_per_class = 20;
  c.benchmark.num_domains = 1;
  c.benchmark.noise = 0.05;
  c.benchmark.jitter = 0.0;
  c.coda.components = 4;
  c.optim.lr = 1e-2;
  const auto stream = generate_benchmark(c.benchmark, 7);
  ViTEncoder enc(c.encoder, 8);
  enc.freeze();
  const auto queries = compute_queries(enc, stream);
  Learner l = make_learner(StrategyKind::kCoda, c, enc, 0);
  TrainConfig tc = c.optim;
  tc.epochs = 50;
  const auto log = train_task(l, stream, 0, &queries.train[0], tc, 0);
  EXPECT_LT(log.epoch_loss.back(), log.epoch_loss.front());
  const auto pred = argmax_rows(forward_inference(l, stream.tasks[0].train.images,
                                                  &queries.train[0]));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == stream.tasks[0].train.labels[i]) ++correct;
  }
  EXPECT_EQ(correct, pred.size());
}

TEST(Learner, NonFiniteLossIsNumericError) {
  auto s = micro_setup("non_finite");
  Learner l = make_learner(StrategyKind::kCoda, s.config, s.encoder, 0);
  auto params = l.strategy->named_parameters();
  (*params[0].second)[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(train_task(l, s.stream, 0, &s.queries.train[0], s.config.optim, 0), NumericError);
}

TEST(Learner, FineTuneInferenceIsPlainEncoderForward) {
  auto s = micro_setup("ft_forward");
  Learner l = make_learner(StrategyKind::kFineTune, s.config, s.encoder, 0);
  l.head.add_task(2, 9);
  const Tensor images = s.stream.tasks[0].test.images;
  const Tensor logits = forward_inference(l, images);
  Tape t;
  Var want = l.head.forward(t, s.encoder.encode(t, images));
  EXPECT_TRUE(bitwise_equal(logits, want.value()));
  EXPECT_EQ(l.trainable_parameter_count(),
            s.encoder.parameter_count() + l.head.parameter_count());
}

TEST(Learner, InferenceMatchesStepByStepPipeline) {
  auto s = micro_setup("pipeline");
  Learner l = make_learner(StrategyKind::kCoda, s.config, s.encoder, 11);
  l.strategy->begin_task(0, 2);
  l.head.add_task(2, 12);
  l.head.add_task(2, 13);
  auto& bank = dynamic_cast<CodaStrategy&>(*l.strategy).bank();
  const Tensor images = s.stream.tasks[1].test.images;
  const Tensor logits = forward_inference(l, images);
  const Tensor again = forward_inference(l, images);
  EXPECT_TRUE(bitwise_equal(logits, again));
  const auto pred = argmax_rows(logits);
  for (std::size_t i = 0; i < images.dim(0); ++i) {
    const std::size_t idx[] = {i};
    const Tensor x = gather_rows(images, idx);
    const Tensor q = s.encoder.query(x).reshaped({8});
    Tape t;
    LayerPrompts prompts;
    for (std::size_t layer : bank.layers()) {
      const Tensor p = assemble_prompt(weight_alpha(q, bank, layer), bank, layer);
      prompts[layer] = t.constant(p.reshaped({1, p.dim(0), p.dim(1)}));
    }
    const Tensor e = s.encoder.encode(t, x, prompts).value();
    std::size_t best = 0;
    double best_score = -1e300;
    for (std::size_t c = 0; c < 4; ++c) {
      double z = l.head.bias()[c];
      for (std::size_t j = 0; j < 8; ++j) z += l.head.weight()(c, j) * e[j];
      EXPECT_NEAR(z, logits(i, c), 1e-12);
      if (z > best_score) {
        best_score = z;
        best = c;
      }
    }
    EXPECT_EQ(pred[i], best);
  }
}

TEST(Learner, CodaParameterCountClosedForm) {
  auto s = micro_setup("param_count");
  Learner l = make_learner(StrategyKind::kCoda, s.config, s.encoder, 0);
  l.head.add_task(2, 1);
  l.head.add_task(2, 2);
  const std::size_t m = 4, lp = 2, d = 8, layers = 2;
  EXPECT_EQ(l.trainable_parameter_count(), layers * (m * lp * d + 2 * m * d) + (4 * d + 4));
  EXPECT_EQ(l.total_parameter_count(), l.trainable_parameter_count() + s.encoder.parameter_count());
}

// ---------------------------------------------------------------------------
// Trials

struct Snapshot {
  std::map<std::string, Tensor> encoder;
  std::map<std::string, Tensor> strategy;
  std::size_t frozen = 0;
};

Snapshot snapshot(Learner& l) {
  Snapshot s;
  for (auto& [name, t] : l.encoder.named_parameters()) s.encoder[name] = *t;
  for (auto& [name, t] : l.strategy->named_parameters()) s.strategy[name] = *t;
  if (auto* coda = dynamic_cast<CodaStrategy*>(l.strategy.get())) {
    s.frozen = coda->bank().frozen_count();
  }
  return s;
}

TEST(Trial, FrozenSlicesAndEncoderBitwiseUnchanged) {
  auto s = micro_setup("frozen");
  s.config.benchmark.num_tasks = 4;
  s.config.benchmark.num_classes = 8;
  s.config.optim.epochs = 2;
  s.stream = generate_benchmark(s.config.benchmark, 0);
  s.queries = compute_queries(s.encoder, s.stream);
  std::vector<Snapshot> before;
  std::size_t checked = 0;
  TrialObserver obs;
  obs.before_task = [&](std::size_t, Learner& l) { before.push_back(snapshot(l)); };
  obs.after_task = [&](std::size_t task, Learner& l) {
    const Snapshot after = snapshot(l);
    for (const auto& [name, t] : before.back().encoder) {
      EXPECT_TRUE(bitwise_equal(t, after.encoder.at(name))) << name;
    }
    const std::size_t frozen = task;  // one component per task: M = 4, N = 4
    EXPECT_EQ(after.frozen, frozen);
    for (const auto& [name, t] : before.back().strategy) {
      const Tensor& now = after.strategy.at(name);
      const std::size_t n = frozen * t.row_size();
      EXPECT_TRUE(std::equal(t.data().begin(), t.data().begin() + n, now.data().begin()))
          << name << " task " << task;
      // Components past the current task also stay untouched.
      const std::size_t end = (task + 1) * t.row_size();
      EXPECT_TRUE(std::equal(t.data().begin() + end, t.data().end(), now.data().begin() + end))
          << name << " task " << task;
      if (task > 0) {
        EXPECT_FALSE(std::equal(t.data().begin() + n, t.data().begin() + end, now.data().begin() + n))
            << name << " did not train";
      }
    }
    ++checked;
  };
  const auto r = run_trial(s.config, StrategyKind::kCoda, s.stream, s.encoder, &s.queries, 0, obs);
  EXPECT_EQ(checked, 4u);
  for (std::size_t t = 1; t < r.logs.size(); ++t) {
    EXPECT_EQ(r.logs[t].past_head_grad_norm, 0.0) << t;
  }
}

TEST(Trial, PastHeadGradientZeroForEveryStrategy) {
  auto s = micro_setup("past_head");
  for (StrategyKind kind : {StrategyKind::kCoda, StrategyKind::kPoolTopK,
                            StrategyKind::kPerTask, StrategyKind::kFineTune}) {
    const auto r = run_trial(s.config, kind, s.stream, s.encoder, &s.queries, 0);
    ASSERT_EQ(r.logs.size(), 2u);
    EXPECT_GT(r.logs[1].steps, 0u);
    EXPECT_EQ(r.logs[1].past_head_grad_norm, 0.0) << strategy_name(kind);
  }
}

TEST(Trial, FineTuneTrainsItsOwnEncoderCopy) {
  auto s = micro_setup("ft_changes");
  std::vector<Tensor> after_ft;
  TrialObserver obs;
  obs.after_task = [&](std::size_t, Learner& l) {
    after_ft.clear();
    for (Tensor* t : l.encoder.parameters()) after_ft.push_back(*t);
  };
  run_trial(s.config, StrategyKind::kFineTune, s.stream, s.encoder, nullptr, 0, obs);
  bool changed = false;
  auto params = s.encoder.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    changed = changed || !bitwise_equal(*params[i], after_ft[i]);
  }
  EXPECT_TRUE(changed);
  EXPECT_TRUE(s.encoder.frozen());
}

TEST(Trial, MetricsMatchMatrix) {
  auto s = micro_setup("metrics");
  const auto r = run_trial(s.config, StrategyKind::kCoda, s.stream, s.encoder, &s.queries, 0);
  EXPECT_NEAR(r.avg_acc, brute_avg_accuracy(r.matrix.a, r.matrix.weights), 1e-12);
  EXPECT_NEAR(*r.forgetting, brute_forgetting(r.matrix.a), 1e-12);
}

TEST(Trial, StrategiesShareEncoderAndStream) {
  auto s = micro_setup("shared");
  s.config.strategies = {StrategyKind::kCoda, StrategyKind::kPoolTopK, StrategyKind::kPerTask};
  s.config.pretrain.epochs = 0;
  std::vector<std::vector<Tensor>> seen;
  TrialObserver obs;
  obs.before_task = [&](std::size_t task, Learner& l) {
    if (task != 0) return;
    std::vector<Tensor> v;
    for (Tensor* t : l.encoder.parameters()) v.push_back(*t);
    seen.push_back(std::move(v));
  };
  const auto report = run_experiment(s.config, obs);
  ASSERT_EQ(seen.size(), 3u);
  for (std::size_t k = 1; k < 3; ++k)
    for (std::size_t i = 0; i < seen[0].size(); ++i) EXPECT_TRUE(bitwise_equal(seen[0][i], seen[k][i]));
  for (const auto& t : report.trials) EXPECT_EQ(t.matrix.weights, report.trials[0].matrix.weights);
}

TEST(Experiment, IdenticalConfigGivesBitwiseIdenticalReport) {
  RunConfig c = micro_config(test::work_dir("determinism"));
  c.checkpoints = false;
  c.seeds = {0, 1};
  c.strategies = {StrategyKind::kCoda, StrategyKind::kFineTune};
  const auto a = run_experiment(c);
  c.jobs = 2;
  const auto b = run_experiment(c);
  // Only the recorded worker count differs.
  EXPECT_EQ(to_json(a)["trials"].dump(), to_json(b)["trials"].dump());
  EXPECT_EQ(to_json(a)["summary"].dump(), to_json(b)["summary"].dump());
  EXPECT_EQ(results_csv(a.trials), results_csv(b.trials));
  c.jobs = 1;
  EXPECT_EQ(to_json(a).dump(), to_json(run_experiment(c)).dump());
}

TEST(Experiment, ResumesFromCheckpointsWithoutRetraining) {
  RunConfig c = micro_config(test::work_dir("resume"));
  c.strategies = {StrategyKind::kCoda, StrategyKind::kPerTask, StrategyKind::kFineTune};
  std::size_t trained = 0;
  TrialObserver obs;
  obs.before_task = [&](std::size_t, Learner&) { ++trained; };
  const auto first = run_experiment(c, obs);
  EXPECT_EQ(trained, 6u);
  trained = 0;
  const auto second = run_experiment(c, obs);
  EXPECT_EQ(trained, 0u);
  EXPECT_EQ(to_json(first).dump(), to_json(second).dump());

  // Dropping the last checkpoint retrains only the last task.
  std::filesystem::remove(detail::checkpoint_path(c, "coda", 0, 1));
  trained = 0;
  const auto third = run_experiment(c, obs);
  EXPECT_EQ(trained, 1u);
  EXPECT_EQ(to_json(first).dump(), to_json(third).dump());

  // A different configuration ignores stale checkpoints.
  c.optim.lr *= 2;
  trained = 0;
  run_experiment(c, obs);
  EXPECT_EQ(trained, 6u);
}

TEST(Experiment, PretrainedEncoderIsCached) {
  RunConfig c = micro_config(test::work_dir("encoder_cache"));
  const auto stream = generate_benchmark(c.benchmark, 0);
  double acc1 = -1, acc2 = -1;
  ViTEncoder a = pretrained_encoder(c, 0, stream, &acc1);
  std::size_t files = 0;
  for (auto& e : std::filesystem::directory_iterator(c.cache_path())) {
    (void)e;
    ++files;
  }
  EXPECT_EQ(files, 1u);
  ViTEncoder b = pretrained_encoder(c, 0, stream, &acc2);
  EXPECT_EQ(acc1, acc2);
  EXPECT_TRUE(a.frozen());
  auto pa = a.parameters();
  auto pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(bitwise_equal(*pa[i], *pb[i]));
}

TEST(Experiment, AblationTogglesRunAndAreLabelled) {
  RunConfig c = micro_config(test::work_dir("ablations"));
  c.checkpoints = false;
  std::vector<std::string> labels;
  for (int which = 0; which < 3; ++which) {
    RunConfig a = c;
    if (which == 0) a.coda.attention = false;
    if (which == 1) a.coda.freezing = false;
    if (which == 2) a.coda.ortho_weight = 0.0;
    const auto r = run_experiment(a);
    ASSERT_EQ(r.trials.size(), 1u);
    labels.push_back(r.trials[0].strategy);
  }
  EXPECT_EQ(labels, (std::vector<std::string>{"coda-noattn", "coda-nofreeze", "coda-noortho"}));
}

TEST(Report, CsvRoundTripReproducesMetrics) {
  RunConfig c = micro_config(test::work_dir("csv_roundtrip"));
  c.checkpoints = false;
  c.strategies = {StrategyKind::kCoda, StrategyKind::kPoolTopK};
  const auto report = run_experiment(c);
  std::filesystem::create_directories(c.output_dir);
  write_report(report, c.output_dir);
  const auto dir = report_directory(c.output_dir);
  EXPECT_TRUE(dir.warnings.empty());
  ASSERT_EQ(dir.summary.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_NEAR(dir.summary[i].avg_acc.mean, report.summary[i].avg_acc.mean, 1e-12);
    EXPECT_NEAR(dir.summary[i].forgetting->mean, report.summary[i].forgetting->mean, 1e-12);
  }
}

TEST(Report, IncompleteRunWarns) {
  RunConfig c = micro_config(test::work_dir("incomplete"));
  c.checkpoints = false;
  c.seeds = {0, 1};
  auto report = run_experiment(c);
  report.trials.pop_back();
  std::filesystem::create_directories(c.output_dir);
  write_report(report, c.output_dir);
  const auto dir = report_directory(c.output_dir);
  ASSERT_FALSE(dir.warnings.empty());
  EXPECT_NE(dir.warnings.back().find("incomplete"), std::string::npos);
  EXPECT_EQ(dir.summary.size(), 1u);
}

// ---------------------------------------------------------------------------
// Configuration

TEST(Config, EveryProblemIsListed) {
  nlohmann::json doc = {{"strategies", {"coda", "bogus"}},
                        {"colour", 3},
                        {"coda", {{"components", "many"}, {"extra", 1}}},
                        {"optim", {{"epochs", -2}}}};
  try {
    config_from_json(doc);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    for (const char* needle : {"bogus", "'colour'", "coda.components", "'coda.extra'", "optim.epochs"}) {
      EXPECT_NE(msg.find(needle), std::string::npos) << needle << "\n" << msg;
    }
    EXPECT_NE(msg.find("5 problems"), std::string::npos) << msg;
  }
}

TEST(Config, ValidationListsSemanticViolations) {
  RunConfig c;
  c.coda.components = 7;
  c.benchmark.num_classes = 21;
  c.encoder.embed_dim = 30;
  const auto v = c.violations();
  EXPECT_GE(v.size(), 3u);
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, JsonRoundTripAndOverrides) {
  RunConfig c = micro_config("runs/x");
  nlohmann::json doc = to_json(c);
  set_override(doc, "coda.components", "8");
  set_override(doc, "coda.attention", "false");
  set_override(doc, "output_dir", "elsewhere");
  const RunConfig back = config_from_json(doc);
  EXPECT_EQ(back.coda.components, 8u);
  EXPECT_FALSE(back.coda.attention);
  EXPECT_EQ(back.output_dir, "elsewhere");
  EXPECT_EQ(back.encoder, c.encoder);
  EXPECT_EQ(back.benchmark.num_classes, c.benchmark.num_classes);
  EXPECT_EQ(to_json(config_from_json(to_json(c))).dump(), to_json(c).dump());
}

TEST(Config, OutputRootRebasesRelativePaths) {
  RunConfig c;
  c.output_dir = "runs/a";
  c.cache_dir = "/abs/cache";
  apply_output_root(c, "/tmp/root");
  EXPECT_EQ(c.output_dir, "/tmp/root/runs/a");
  EXPECT_EQ(c.cache_dir, "/abs/cache");
}

TEST(Sweep, InvalidPointAbortsBeforeRunning) {
  RunConfig c = micro_config(test::work_dir("sweep_invalid"));
  EXPECT_THROW(sweep_configs(c, SweepAxis::kComponents, {2, 3, 4}), ConfigError);
  EXPECT_FALSE(std::filesystem::exists(std::filesystem::path(c.output_dir) / "components-2"));
  const auto configs = sweep_configs(c, SweepAxis::kPromptLength, {2, 4});
  ASSERT_EQ(configs.size(), 2u);
  EXPECT_EQ(configs[1].coda.prompt_length, 4u);
  EXPECT_EQ(configs[0].cache_dir, configs[1].cache_dir);
}

}  // namespace
}  // namespace coda
