// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The coda-prompt authors.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "coda/autograd.hpp"
#include "coda/config.hpp"
#include "coda/data.hpp"
#include "coda/head.hpp"
#include "coda/optim.hpp"
#include "coda/pretrain.hpp"
#include "coda/prompt.hpp"
#include "coda/serialize.hpp"
#include "coda/vit.hpp"
#include "json.hpp"

namespace coda {

// ---------------------------------------------------------------------------
// Metrics

/// a[t][j]: accuracy on task j's test classes after training task t (j <= t).
struct AccuracyMatrix {
  std::size_t num_tasks = 0;
  std::vector<std::vector<double>> a;
  /// Test sample count of each task, used to weight Acc_t.
  std::vector<double> weights;

  bool complete() const { return num_tasks > 0 && a.size() == num_tasks; }

  void add_row(std::vector<double> row) {
    if (a.size() >= num_tasks || row.size() != a.size() + 1) {
      throw DimensionError("accuracy row " + std::to_string(a.size()) +
                           " must have " + std::to_string(a.size() + 1) +
                           " entries");
    }
    a.push_back(std::move(row));
  }

  /// Accuracy over all classes seen after task t, weighted by test counts.
  double seen_accuracy(std::size_t t) const {
    double num = 0.0;
    double den = 0.0;
    for (std::size_t j = 0; j <= t; ++j) {
      const double w = j < weights.size() ? weights[j] : 1.0;
      num += w * a.at(t).at(j);
      den += w;
    }
    return den > 0.0 ? num / den : 0.0;
  }
};

/// Mean of the per-checkpoint accuracies over all seen classes.
inline double avg_accuracy(const std::vector<double>& acc_seen) {
  if (acc_seen.empty()) throw StateError("no accuracies to average");
  return std::accumulate(acc_seen.begin(), acc_seen.end(), 0.0) /
         static_cast<double>(acc_seen.size());
}

inline double avg_accuracy(const AccuracyMatrix& m) {
  if (!m.complete()) {
    throw StateError("accuracy matrix has " + std::to_string(m.a.size()) +
                     " of " + std::to_string(m.num_tasks) + " rows");
  }
  std::vector<double> seen;
  for (std::size_t t = 0; t < m.num_tasks; ++t) seen.push_back(m.seen_accuracy(t));
  return avg_accuracy(seen);
}

/// Mean over earlier tasks of (best accuracy after learning it - final
/// accuracy). Absent for fewer than two tasks.
inline std::optional<double> avg_forgetting(const AccuracyMatrix& m) {
  if (!m.complete()) {
    throw StateError("accuracy matrix has " + std::to_string(m.a.size()) +
                     " of " + std::to_string(m.num_tasks) + " rows");
  }
  const std::size_t n = m.num_tasks;
  if (n < 2) return std::nullopt;
  double total = 0.0;
  for (std::size_t j = 0; j + 1 < n; ++j) {
    double best = m.a[j][j];
    for (std::size_t t = j; t < n; ++t) best = std::max(best, m.a[t][j]);
    total += best - m.a[n - 1][j];
  }
  return total / static_cast<double>(n - 1);
}

struct MeanStd {
  double mean = 0.0;
  /// Sample standard deviation; 0 for a single value.
  double std = 0.0;
  std::size_t count = 0;
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  r.count = v.size();
  if (v.empty()) return r;
  r.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Learner

/// Past-task logits (outside [begin, end)) replaced by -inf.
inline Var mask_past_logits(Var logits, std::size_t begin, std::size_t end) {
  if (begin >= end) throw ConfigError("empty current-task logit range");
  return mask_columns(logits, begin, end);
}

inline Tensor mask_past_logits(const Tensor& logits, std::size_t begin,
                               std::size_t end) {
  Tape tape;
  return mask_past_logits(tape.constant(logits), begin, end).value();
}

/// Encoder, prompt strategy and classifier head of one (trial, strategy).
struct Learner {
  StrategyKind kind = StrategyKind::kCoda;
  ViTEncoder encoder;
  std::unique_ptr<PromptStrategy> strategy;
  ClassifierHead head;

  bool uses_queries() const { return kind != StrategyKind::kFineTune; }

  /// Logits [B x C]. queries are required for prompting strategies.
  Var logits(Tape& tape, const Tensor& images, const Tensor* queries,
             std::optional<std::size_t> train_task,
             std::optional<Var>* aux = nullptr) {
    Prompting p;
    if (uses_queries()) {
      if (queries == nullptr) throw StateError("prompting needs queries");
      p = strategy->prompt(tape, *queries, train_task);
    }
    if (aux != nullptr) *aux = p.aux_loss;
    return head.forward(tape, encoder.encode(tape, images, p.prompts));
  }

  std::size_t trainable_parameter_count() const {
    const std::size_t own = strategy->parameter_count() + head.parameter_count();
    return kind == StrategyKind::kFineTune ? own + encoder.parameter_count() : own;
  }

  std::size_t total_parameter_count() const {
    return encoder.parameter_count() + strategy->parameter_count() +
           head.parameter_count();
  }
};

inline Learner make_learner(StrategyKind kind, const RunConfig& config,
                            const ViTEncoder& pretrained, std::uint64_t seed) {
  Learner l;
  l.kind = kind;
  l.encoder = pretrained;
  const auto& layers = config.encoder.prompt_layers;
  const std::size_t d = config.encoder.embed_dim;
  switch (kind) {
    case StrategyKind::kCoda:
      l.strategy = std::make_unique<CodaStrategy>(config.coda, layers, d, seed);
      break;
    case StrategyKind::kPoolTopK:
      l.strategy = std::make_unique<PoolStrategy>(config.l2p, layers, d, seed);
      break;
    case StrategyKind::kPerTask:
      l.strategy = std::make_unique<PerTaskStrategy>(
          config.dualprompt, layers, d, config.benchmark.num_tasks, seed);
      break;
    case StrategyKind::kFineTune:
      l.strategy = std::make_unique<NoPromptStrategy>();
      l.encoder.unfreeze();
      break;
  }
  l.head = ClassifierHead(d);
  return l;
}

/// Class scores over every seen class, without masking. queries may be
/// null, in which case they are computed from the learner's encoder.
inline Tensor forward_inference(Learner& learner, const Tensor& images,
                                const Tensor* queries = nullptr) {
  Tensor computed;
  if (learner.uses_queries() && queries == nullptr) {
    computed = learner.encoder.query(images);
    queries = &computed;
  }
  Tape tape;
  return learner.logits(tape, images, queries, std::nullopt).value();
}

/// Frozen-encoder queries of every task's train and test split.
struct QueryCache {
  std::vector<Tensor> train;
  std::vector<Tensor> test;
};

inline Tensor batched_query(const ViTEncoder& encoder, const Tensor& images,
                            std::size_t batch) {
  const std::size_t n = images.dim(0);
  const std::size_t d = encoder.config().embed_dim;
  Tensor out({n, d});
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t end = std::min(n, start + batch);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    Tensor q = encoder.query(gather_rows(images, idx));
    std::copy(q.data().begin(), q.data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(start * d));
  }
  return out;
}

inline QueryCache compute_queries(const ViTEncoder& encoder,
                                  const TaskStream& stream,
                                  std::size_t batch = 64) {
  QueryCache c;
  for (const Task& t : stream.tasks) {
    c.train.push_back(batched_query(encoder, t.train.images, batch));
    c.test.push_back(batched_query(encoder, t.test.images, batch));
  }
  return c;
}

struct TaskLog {
  std::vector<double> epoch_loss;
  /// Largest L2 norm of the per-step gradient on past-task head rows.
  double past_head_grad_norm = 0.0;
  std::size_t steps = 0;
};

/// Trains one task: strategy.begin_task, head growth, then epochs of masked
/// cross-entropy plus the strategy's auxiliary loss. Only the strategy's
/// trainable slots, the new head rows and (fine-tuning) the encoder change.
inline TaskLog train_task(Learner& learner, const TaskStream& stream,
                          std::size_t task, const Tensor* train_queries,
                          const TrainConfig& config, std::uint64_t seed) {
  const Task& t = stream.tasks.at(task);
  const std::size_t num_tasks = stream.num_tasks();
  learner.strategy->begin_task(task, num_tasks);
  learner.head.add_task(t.num_classes(),
                        derive_seed(seed, Stream::kHeadInit, {task}));
  if (learner.head.num_classes() != t.label_end) {
    throw StateError("classifier head out of step with the task stream");
  }

  std::vector<ParamSlot> slots = learner.strategy->trainable_slots();
  for (const auto& s : learner.head.task_slots(task)) slots.push_back(s);
  if (learner.kind == StrategyKind::kFineTune) {
    for (Tensor* p : learner.encoder.parameters()) slots.push_back(whole(*p));
  }
  const std::size_t n = t.train.size();
  const std::size_t per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const double lr =
      learner.kind == StrategyKind::kFineTune ? config.ft_lr : config.lr;
  Adam opt(slots, AdamConfig{lr, 0.9, 0.999, 1e-8, config.cosine},
           per_epoch * config.epochs);

  auto zero_all = [&learner]() {
    for (auto& [name, p] : learner.strategy->named_parameters()) p->zero_grad();
    learner.head.zero_grad();
    for (Tensor* p : learner.encoder.parameters()) p->zero_grad();
  };

  TaskLog log;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    Rng rng(derive_seed(seed, Stream::kEpochOrder, {task, epoch}));
    const auto order = rng.permutation(n);
    double total = 0.0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t end = std::min(n, start + config.batch_size);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      std::vector<std::size_t> labels;
      for (std::size_t i : idx) labels.push_back(t.train.labels[i]);
      Tensor queries;
      if (learner.uses_queries()) queries = gather_rows(*train_queries, idx);

      zero_all();
      Tape tape;
      std::optional<Var> aux;
      Var logits = learner.logits(tape, gather_rows(t.train.images, idx),
                                  learner.uses_queries() ? &queries : nullptr,
                                  task, &aux);
      Var loss = cross_entropy(
          mask_past_logits(logits, t.label_begin, t.label_end), labels);
      if (aux) loss = loss + *aux;
      const double value = loss.value().item();
      if (!std::isfinite(value)) {
        throw NumericError("non-finite loss " + std::to_string(value) +
                           " at task " + std::to_string(task) + ", epoch " +
                           std::to_string(epoch) + ", step " +
                           std::to_string(log.steps));
      }
      tape.backward(loss);
      log.past_head_grad_norm =
          std::max(log.past_head_grad_norm,
                   learner.head.grad_norm_below(t.label_begin));
      opt.step();
      ++log.steps;
      total += value * static_cast<double>(idx.size());
    }
    log.epoch_loss.push_back(n == 0 ? 0.0 : total / static_cast<double>(n));
  }
  zero_all();
  return log;
}

/// Row t of the accuracy matrix: accuracy on each seen task's test split.
inline std::vector<double> evaluate_seen(Learner& learner,
                                         const TaskStream& stream,
                                         std::size_t upto,
                                         const QueryCache* cache,
                                         std::size_t batch = 64) {
  std::vector<double> row;
  for (std::size_t j = 0; j <= upto; ++j) {
    const Split& test = stream.tasks.at(j).test;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < test.size(); start += batch) {
      const std::size_t end = std::min(test.size(), start + batch);
      std::vector<std::size_t> idx(end - start);
      std::iota(idx.begin(), idx.end(), start);
      Tensor q;
      const Tensor* qp = nullptr;
      if (learner.uses_queries() && cache != nullptr) {
        q = gather_rows(cache->test.at(j), idx);
        qp = &q;
      }
      const auto pred =
          argmax_rows(forward_inference(learner, gather_rows(test.images, idx), qp));
      for (std::size_t i = 0; i < idx.size(); ++i) {
        if (pred[i] == test.labels[idx[i]]) ++correct;
      }
    }
    row.push_back(test.size() == 0 ? 0.0
                                   : static_cast<double>(correct) /
                                         static_cast<double>(test.size()));
  }
  return row;
}

// ---------------------------------------------------------------------------
// Trials

struct TrialResult {
  std::uint64_t seed = 0;
  std::string strategy;
  AccuracyMatrix matrix;
  std::vector<double> acc_seen;
  double avg_acc = 0.0;
  std::optional<double> forgetting;
  std::size_t trainable_params = 0;
  std::size_t total_params = 0;
  std::size_t encoder_params = 0;
  std::size_t head_params = 0;
  std::vector<TaskLog> logs;
  double pretext_accuracy = 0.0;
};

/// Hooks for inspecting a learner around each task (tests, diagnostics).
/// Called from the thread running the trial.
struct TrialObserver {
  std::function<void(std::size_t task, Learner&)> before_task;
  std::function<void(std::size_t task, Learner&)> after_task;
};

namespace detail {

inline nlohmann::json log_json(const TaskLog& l) {
  return {{"epoch_loss", l.epoch_loss},
          {"past_head_grad_norm", l.past_head_grad_norm},
          {"steps", l.steps}};
}

inline TaskLog log_from_json(const nlohmann::json& j) {
  TaskLog l;
  l.epoch_loss = j.at("epoch_loss").get<std::vector<double>>();
  l.past_head_grad_norm = j.at("past_head_grad_norm");
  l.steps = j.at("steps");
  return l;
}

/// Everything that determines a trial's outcome.
inline std::uint64_t trial_fingerprint(const RunConfig& c, StrategyKind kind,
                                       std::uint64_t seed) {
  nlohmann::json j = to_json(c);
  j.erase("strategies");
  j.erase("seeds");
  j.erase("output_dir");
  j.erase("cache_dir");
  j.erase("checkpoints");
  j.erase("jobs");
  j["strategy"] = std::string(strategy_name(kind));
  j["seed"] = seed;
  return fingerprint(j);
}

inline std::filesystem::path checkpoint_path(const RunConfig& c,
                                             const std::string& label,
                                             std::uint64_t seed,
                                             std::size_t task) {
  return std::filesystem::path(c.output_dir) / "checkpoints" /
         ("seed" + std::to_string(seed) + "-" + label + "-task" +
          std::to_string(task) + ".ckpt");
}

inline void save_trial_checkpoint(const std::filesystem::path& path,
                                  std::uint64_t fp, Learner& l,
                                  const TrialResult& r, std::size_t task) {
  io::Container c(kCheckpointMagic);
  nlohmann::json logs = nlohmann::json::array();
  for (const auto& g : r.logs) logs.push_back(log_json(g));
  nlohmann::json ranges = nlohmann::json::array();
  for (const auto& [b, e] : l.head.task_ranges()) ranges.push_back({b, e});
  nlohmann::json meta = {{"fingerprint", io::hex64(fp)},
                         {"task", task},
                         {"matrix", r.matrix.a},
                         {"weights", r.matrix.weights},
                         {"logs", logs},
                         {"head_ranges", ranges}};
  if (auto* coda = dynamic_cast<CodaStrategy*>(l.strategy.get())) {
    const auto& bank = coda->bank();
    nlohmann::json sched = nlohmann::json::array();
    for (const auto& s : bank.task_schedule()) sched.push_back({s.begin, s.end});
    meta["bank"] = {{"frozen_count", bank.frozen_count()},
                    {"active_end", bank.active_end()},
                    {"task_schedule", sched}};
  }
  if (auto* pt = dynamic_cast<PerTaskStrategy*>(l.strategy.get())) {
    meta["per_task_seen"] = pt->tasks_seen();
  }
  c.add_text("meta", meta.dump());
  c.add_tensor("head.weight", l.head.weight());
  c.add_tensor("head.bias", l.head.bias());
  for (auto& [name, t] : l.strategy->named_parameters()) c.add_tensor(name, *t);
  if (l.kind == StrategyKind::kFineTune) save_encoder(c, l.encoder);
  io::write_container(path, c);
}

/// Restores learner and partial result; returns false when the checkpoint
/// belongs to a different configuration.
inline bool load_trial_checkpoint(const std::filesystem::path& path,
                                  std::uint64_t fp, Learner& l, TrialResult& r) {
  const auto c = io::read_container(path, kCheckpointMagic);
  const auto meta = nlohmann::json::parse(c.text("meta"));
  if (meta.at("fingerprint") != io::hex64(fp)) return false;
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  for (const auto& e : meta.at("head_ranges")) ranges.emplace_back(e[0], e[1]);
  l.head.assign(c.tensor("head.weight"), c.tensor("head.bias"), ranges);
  for (auto& [name, t] : l.strategy->named_parameters()) c.load_into(name, *t);
  if (auto* coda = dynamic_cast<CodaStrategy*>(l.strategy.get())) {
    const auto& b = meta.at("bank");
    std::vector<ComponentRange> sched;
    for (const auto& e : b.at("task_schedule")) sched.push_back({e[0], e[1]});
    coda->bank().set_schedule(b.at("frozen_count"), b.at("active_end"), sched);
  }
  if (auto* pt = dynamic_cast<PerTaskStrategy*>(l.strategy.get())) {
    const std::size_t seen = meta.at("per_task_seen");
    pt->set_progress(seen == 0 ? 0 : seen - 1, seen);
  }
  if (l.kind == StrategyKind::kFineTune) {
    l.encoder = load_encoder(c);
    l.encoder.unfreeze();
  }
  r.matrix.a = meta.at("matrix").get<std::vector<std::vector<double>>>();
  r.matrix.weights = meta.at("weights").get<std::vector<double>>();
  r.logs.clear();
  for (const auto& g : meta.at("logs")) r.logs.push_back(log_from_json(g));
  return true;
}

}  // namespace detail

/// Runs one strategy through every task of a stream. With checkpoints on,
/// state is saved after each task and a rerun resumes after the last saved
/// task whose fingerprint matches.
inline TrialResult run_trial(const RunConfig& config, StrategyKind kind,
                             const TaskStream& stream,
                             const ViTEncoder& pretrained,
                             const QueryCache* queries, std::uint64_t seed,
                             const TrialObserver& observer = {}) {
  Learner learner = make_learner(kind, config, pretrained, seed);
  TrialResult r;
  r.seed = seed;
  r.strategy = strategy_label(kind, config);
  r.matrix.num_tasks = stream.num_tasks();
  for (const Task& t : stream.tasks) {
    r.matrix.weights.push_back(static_cast<double>(t.test.size()));
  }
  r.encoder_params = pretrained.parameter_count();

  const std::uint64_t fp = detail::trial_fingerprint(config, kind, seed);
  std::size_t first = 0;
  if (config.checkpoints) {
    for (std::size_t t = stream.num_tasks(); t-- > 0;) {
      const auto path = detail::checkpoint_path(config, r.strategy, seed, t);
      if (std::filesystem::exists(path) &&
          detail::load_trial_checkpoint(path, fp, learner, r)) {
        first = t + 1;
        break;
      }
    }
  }

  const bool needs_queries = learner.uses_queries();
  for (std::size_t t = first; t < stream.num_tasks(); ++t) {
    if (observer.before_task) observer.before_task(t, learner);
    r.logs.push_back(train_task(learner, stream, t,
                                needs_queries ? &queries->train.at(t) : nullptr,
                                config.optim, seed));
    r.matrix.add_row(evaluate_seen(learner, stream, t, queries));
    if (observer.after_task) observer.after_task(t, learner);
    if (config.checkpoints) {
      detail::save_trial_checkpoint(
          detail::checkpoint_path(config, r.strategy, seed, t), fp, learner, r,
          t);
    }
  }
  for (std::size_t t = 0; t < r.matrix.a.size(); ++t) {
    r.acc_seen.push_back(r.matrix.seen_accuracy(t));
  }
  r.avg_acc = avg_accuracy(r.matrix);
  r.forgetting = avg_forgetting(r.matrix);
  r.trainable_params = learner.trainable_parameter_count();
  r.total_params = learner.total_parameter_count();
  r.head_params = learner.head.parameter_count();
  return r;
}

/// Pretrained, frozen encoder for a seed, loaded from the cache directory when
/// a matching file exists and written there otherwise.
inline ViTEncoder pretrained_encoder(const RunConfig& config, std::uint64_t seed,
                                     const TaskStream& benchmark,
                                     double* pretext_accuracy = nullptr) {
  nlohmann::json key = {{"encoder", to_json(config.encoder)},
                        {"pretrain", to_json(config)["pretrain"]},
                        {"benchmark", to_json(config.benchmark)},
                        {"seed", seed}};
  key["benchmark"].erase("num_tasks");
  key["benchmark"].erase("dual_shift");
  const std::string fp = io::hex64(fingerprint(key));
  const auto path = config.cache_path() / ("encoder-seed" + std::to_string(seed) +
                                           "-" + fp + ".ckpt");
  const TaskStream pretext = pretext_split(config.pretrain.pretext,
                                           config.benchmark, seed);
  check_disjoint(pretext, benchmark);
  if (std::filesystem::exists(path)) {
    try {
      const auto c = io::read_container(path, kCheckpointMagic);
      auto meta = nlohmann::json::parse(c.text("meta"));
      if (meta.at("fingerprint") == fp) {
        if (pretext_accuracy != nullptr) *pretext_accuracy = meta.at("val_accuracy");
        return load_encoder(c);
      }
    } catch (const IoError&) {
      // unreadable cache entry: rebuild it below
    }
  }
  ViTEncoder encoder(config.encoder, derive_seed(seed, Stream::kEncoderInit));
  const auto result = pretrain(encoder, pretext, config.pretrain, seed, &benchmark);
  if (pretext_accuracy != nullptr) *pretext_accuracy = result.val_accuracy;
  io::Container c(kCheckpointMagic);
  c.add_text("meta", nlohmann::json{{"fingerprint", fp},
                                    {"seed", seed},
                                    {"val_accuracy", result.val_accuracy},
                                    {"epoch_loss", result.epoch_loss}}
                         .dump());
  save_encoder(c, encoder);
  io::write_container(path, c);
  return encoder;
}

// ---------------------------------------------------------------------------
// Experiments and reports

struct StrategySummary {
  std::string strategy;
  MeanStd avg_acc;
  std::optional<MeanStd> forgetting;
  MeanStd final_acc;
  std::size_t trainable_params = 0;
  std::size_t total_params = 0;
  std::size_t encoder_params = 0;
  std::size_t head_params = 0;
};

struct RunReport {
  nlohmann::json config;
  std::vector<TrialResult> trials;
  std::vector<StrategySummary> summary;

  const StrategySummary* find(const std::string& strategy) const {
    for (const auto& s : summary) {
      if (s.strategy == strategy) return &s;
    }
    return nullptr;
  }
};

inline std::vector<StrategySummary> summarize(const std::vector<TrialResult>& trials) {
  std::vector<std::string> order;
  for (const auto& t : trials) {
    if (std::find(order.begin(), order.end(), t.strategy) == order.end()) {
      order.push_back(t.strategy);
    }
  }
  std::vector<StrategySummary> out;
  for (const auto& name : order) {
    StrategySummary s;
    s.strategy = name;
    std::vector<double> a, f, fin;
    for (const auto& t : trials) {
      if (t.strategy != name) continue;
      a.push_back(t.avg_acc);
      if (t.forgetting) f.push_back(*t.forgetting);
      if (!t.acc_seen.empty()) fin.push_back(t.acc_seen.back());
      s.trainable_params = t.trainable_params;
      s.total_params = t.total_params;
      s.encoder_params = t.encoder_params;
      s.head_params = t.head_params;
    }
    s.avg_acc = mean_std(a);
    if (!f.empty()) s.forgetting = mean_std(f);
    s.final_acc = mean_std(fin);
    out.push_back(s);
  }
  return out;
}

inline nlohmann::json to_json(const TrialResult& t) {
  nlohmann::json logs = nlohmann::json::array();
  for (const auto& l : t.logs) logs.push_back(detail::log_json(l));
  return {{"seed", t.seed},
          {"strategy", t.strategy},
          {"accuracy_matrix", t.matrix.a},
          {"task_test_counts", t.matrix.weights},
          {"acc_seen", t.acc_seen},
          {"A_N", t.avg_acc},
          {"F_N", t.forgetting ? nlohmann::json(*t.forgetting) : nlohmann::json()},
          {"final_accuracy", t.acc_seen.empty() ? 0.0 : t.acc_seen.back()},
          {"trainable_params", t.trainable_params},
          {"total_params", t.total_params},
          {"encoder_params", t.encoder_params},
          {"head_params", t.head_params},
          {"pretext_val_accuracy", t.pretext_accuracy},
          {"tasks", logs}};
}

inline nlohmann::json to_json(const RunReport& r) {
  nlohmann::json trials = nlohmann::json::array();
  for (const auto& t : r.trials) trials.push_back(to_json(t));
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& s : r.summary) {
    nlohmann::json e = {{"strategy", s.strategy},
                        {"trials", s.avg_acc.count},
                        {"A_N_mean", s.avg_acc.mean},
                        {"A_N_std", s.avg_acc.std},
                        {"final_accuracy_mean", s.final_acc.mean},
                        {"trainable_params", s.trainable_params},
                        {"total_params", s.total_params},
                        {"encoder_params", s.encoder_params}};
    if (s.forgetting) {
      e["F_N_mean"] = s.forgetting->mean;
      e["F_N_std"] = s.forgetting->std;
    } else {
      e["F_N_mean"] = nullptr;
      e["F_N_std"] = nullptr;
    }
    summary.push_back(e);
  }
  return {{"config", r.config}, {"summary", summary}, {"trials", trials}};
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

/// One row per (trial, strategy, task).
inline std::string results_csv(const std::vector<TrialResult>& trials) {
  std::ostringstream os;
  os << "seed,strategy,task,acc_seen,task_acc,A_N,F_N,trainable_params,"
        "total_params,encoder_params,head_params\n";
  for (const auto& t : trials) {
    for (std::size_t k = 0; k < t.matrix.a.size(); ++k) {
      std::string accs;
      for (std::size_t j = 0; j < t.matrix.a[k].size(); ++j) {
        if (j > 0) accs += ';';
        accs += format_double(t.matrix.a[k][j]);
      }
      os << t.seed << ',' << t.strategy << ',' << k << ','
         << format_double(t.acc_seen.at(k)) << ',' << accs << ','
         << format_double(t.avg_acc) << ','
         << (t.forgetting ? format_double(*t.forgetting) : std::string()) << ','
         << t.trainable_params << ',' << t.total_params << ','
         << t.encoder_params << ',' << t.head_params << '\n';
    }
  }
  return os.str();
}

/// Writes config.json, report.json and results.csv into config.output_dir.
inline void write_report(const RunReport& report, const std::filesystem::path& dir) {
  io::write_bytes(dir / "config.json", report.config.dump(2) + "\n");
  io::write_bytes(dir / "report.json", to_json(report).dump(2) + "\n");
  io::write_bytes(dir / "results.csv", results_csv(report.trials));
}

/// Runs every (seed, strategy) trial. Within a seed all strategies share the
/// task stream, the pretrained encoder and its queries. Seeds run on up to
/// config.jobs threads; results are ordered by (seed, strategy) as listed.
inline RunReport run_experiment(const RunConfig& config,
                                const TrialObserver& observer = {},
                                std::ostream* progress = nullptr) {
  config.validate();
  const std::size_t n_seeds = config.seeds.size();
  std::vector<std::vector<TrialResult>> per_seed(n_seeds);
  std::mutex mu;
  std::exception_ptr failure;

  auto run_seed = [&](std::size_t i) {
    const std::uint64_t seed = config.seeds[i];
    const TaskStream stream = generate_benchmark(config.benchmark, seed);
    double pretext_acc = 0.0;
    const ViTEncoder encoder = pretrained_encoder(config, seed, stream, &pretext_acc);
    std::optional<QueryCache> queries;
    for (StrategyKind kind : config.strategies) {
      if (kind != StrategyKind::kFineTune && !queries) {
        queries = compute_queries(encoder, stream);
      }
      TrialResult r = run_trial(config, kind, stream, encoder,
                                queries ? &*queries : nullptr, seed, observer);
      r.pretext_accuracy = pretext_acc;
      if (progress != nullptr) {
        std::lock_guard<std::mutex> lock(mu);
        *progress << "seed " << seed << " " << r.strategy << ": A_N "
                  << r.avg_acc << ", F_N "
                  << (r.forgetting ? std::to_string(*r.forgetting) : "n/a")
                  << std::endl;
      }
      per_seed[i].push_back(std::move(r));
    }
  };

  const std::size_t workers = std::min(config.jobs, n_seeds);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n_seeds; ++i) run_seed(i);
  } else {
    std::size_t next = 0;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&]() {
        while (true) {
          std::size_t i;
          {
            std::lock_guard<std::mutex> lock(mu);
            if (next >= n_seeds || failure) return;
            i = next++;
          }
          try {
            run_seed(i);
          } catch (...) {
            std::lock_guard<std::mutex> lock(mu);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
  }

  RunReport report;
  report.config = to_json(config);
  for (auto& v : per_seed) {
    for (auto& r : v) report.trials.push_back(std::move(r));
  }
  report.summary = summarize(report.trials);
  return report;
}

// ---------------------------------------------------------------------------
// Report rendering from a run directory

struct CsvRow {
  std::uint64_t seed = 0;
  std::string strategy;
  std::size_t task = 0;
  double acc_seen = 0.0;
  std::vector<double> task_acc;
  std::size_t trainable_params = 0;
  std::size_t total_params = 0;
  std::size_t encoder_params = 0;
  std::size_t head_params = 0;
};

inline std::vector<std::string> split_string(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

inline std::vector<CsvRow> read_results_csv(const std::filesystem::path& path) {
  std::istringstream in(io::read_bytes(path));
  std::string line;
  std::getline(in, line);
  std::vector<CsvRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_string(line, ',');
    if (f.size() < 11) throw IoError("malformed results row: " + line);
    CsvRow r;
    r.seed = std::stoull(f[0]);
    r.strategy = f[1];
    r.task = std::stoul(f[2]);
    r.acc_seen = std::stod(f[3]);
    for (const auto& v : split_string(f[4], ';')) r.task_acc.push_back(std::stod(v));
    r.trainable_params = std::stoul(f[7]);
    r.total_params = std::stoul(f[8]);
    r.encoder_params = std::stoul(f[9]);
    r.head_params = std::stoul(f[10]);
    rows.push_back(std::move(r));
  }
  return rows;
}

/// Rebuilds trial results (accuracy matrix and metrics) from CSV rows.
/// `num_tasks` marks trials with fewer rows as incomplete.
inline std::vector<TrialResult> trials_from_csv(const std::vector<CsvRow>& rows,
                                                std::size_t num_tasks,
                                                std::vector<std::string>* warnings) {
  std::vector<TrialResult> out;
  for (const auto& row : rows) {
    auto it = std::find_if(out.begin(), out.end(), [&](const TrialResult& t) {
      return t.seed == row.seed && t.strategy == row.strategy;
    });
    if (it == out.end()) {
      TrialResult t;
      t.seed = row.seed;
      t.strategy = row.strategy;
      t.matrix.num_tasks = num_tasks;
      out.push_back(t);
      it = out.end() - 1;
    }
    it->matrix.a.push_back(row.task_acc);
    it->acc_seen.push_back(row.acc_seen);
    it->trainable_params = row.trainable_params;
    it->total_params = row.total_params;
    it->encoder_params = row.encoder_params;
    it->head_params = row.head_params;
  }
  std::vector<TrialResult> complete;
  for (auto& t : out) {
    if (t.matrix.a.size() != num_tasks) {
      if (warnings != nullptr) {
        warnings->push_back("seed " + std::to_string(t.seed) + " " + t.strategy +
                            " has " + std::to_string(t.matrix.a.size()) + " of " +
                            std::to_string(num_tasks) + " tasks");
      }
      continue;
    }
    t.avg_acc = avg_accuracy(t.acc_seen);
    t.forgetting = avg_forgetting(t.matrix);
    complete.push_back(std::move(t));
  }
  return complete;
}

inline std::string percent(std::size_t part, std::size_t whole) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << (whole == 0 ? 0.0 : 100.0 * static_cast<double>(part) / static_cast<double>(whole));
  return os.str();
}

inline std::string fixed(double v, int digits = 2) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

/// Aligned table: strategy, A_N and F_N (mean +- std, in percent), trials and
/// parameter counts as percentages of the frozen encoder, classifier head excluded.
inline std::string format_table(const std::vector<StrategySummary>& summary) {
  std::vector<std::vector<std::string>> cells = {
      {"strategy", "A_N (%)", "F_N (%)", "trials", "Train (%)", "Final (%)"}};
  for (const auto& s : summary) {
    cells.push_back(
        {s.strategy,
         fixed(100 * s.avg_acc.mean) + " +- " + fixed(100 * s.avg_acc.std),
         s.forgetting ? fixed(100 * s.forgetting->mean) + " +- " +
                            fixed(100 * s.forgetting->std)
                      : std::string("n/a"),
         std::to_string(s.avg_acc.count),
         percent(s.trainable_params - s.head_params, s.encoder_params),
         percent(s.total_params - s.head_params, s.encoder_params)});
  }
  std::vector<std::size_t> width(cells[0].size(), 0);
  for (const auto& row : cells) {
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  }
  std::ostringstream os;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    for (std::size_t i = 0; i < cells[r].size(); ++i) {
      os << (i == 0 ? "" : "  ") << cells[r][i]
         << std::string(width[i] - cells[r][i].size(), ' ');
    }
    os << '\n';
    if (r == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w;
      os << std::string(total + 2 * (width.size() - 1), '-') << '\n';
    }
  }
  return os.str();
}

/// Summary CSV matching format_table.
inline std::string summary_csv(const std::vector<StrategySummary>& summary) {
  std::ostringstream os;
  os << "strategy,A_N_mean,A_N_std,F_N_mean,F_N_std,trials,train_pct,final_pct\n";
  for (const auto& s : summary) {
    os << s.strategy << ',' << format_double(s.avg_acc.mean) << ','
       << format_double(s.avg_acc.std) << ','
       << (s.forgetting ? format_double(s.forgetting->mean) : "") << ','
       << (s.forgetting ? format_double(s.forgetting->std) : "") << ','
       << s.avg_acc.count << ',' << percent(s.trainable_params - s.head_params, s.encoder_params)
       << ',' << percent(s.total_params - s.head_params, s.encoder_params) << '\n';
  }
  return os.str();
}

struct DirectoryReport {
  std::vector<StrategySummary> summary;
  std::vector<std::string> warnings;
  std::string table;
};

/// Recomputes the comparison table of a run directory from results.csv.
/// Missing trials (per config.json) are reported as warnings.
inline DirectoryReport report_directory(const std::filesystem::path& dir) {
  DirectoryReport out;
  const auto config = read_json_file(dir / "config.json");
  const std::size_t num_tasks = config.at("benchmark").at("num_tasks");
  std::vector<CsvRow> rows;
  if (std::filesystem::exists(dir / "results.csv")) {
    rows = read_results_csv(dir / "results.csv");
  } else {
    out.warnings.push_back("results.csv missing");
  }
  auto trials = trials_from_csv(rows, num_tasks, &out.warnings);
  const std::size_t expected =
      config.at("seeds").size() * config.at("strategies").size();
  if (trials.size() < expected) {
    out.warnings.push_back("incomplete run: " + std::to_string(trials.size()) +
                           " of " + std::to_string(expected) +
                           " trials finished");
  }
  out.summary = summarize(trials);
  out.table = format_table(out.summary);
  return out;
}

// ---------------------------------------------------------------------------
// Sweeps

enum class SweepAxis { kComponents, kPromptLength };

inline std::optional<SweepAxis> parse_axis(std::string_view s) {
  if (s == "components" || s == "M") return SweepAxis::kComponents;
  if (s == "prompt_length" || s == "L_p" || s == "lp") {
    return SweepAxis::kPromptLength;
  }
  return std::nullopt;
}

inline std::string_view axis_name(SweepAxis a) {
  return a == SweepAxis::kComponents ? "components" : "prompt_length";
}

struct SweepPoint {
  std::size_t value = 0;
  MeanStd avg_acc;
  std::optional<MeanStd> forgetting;
};

/// Per-point configurations (CODA only). Every point is validated before any
/// is returned.
inline std::vector<RunConfig> sweep_configs(const RunConfig& base, SweepAxis axis,
                                            const std::vector<std::size_t>& values) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  std::vector<RunConfig> out;
  std::vector<std::string> errors;
  for (std::size_t v : values) {
    RunConfig c = base;
    c.strategies = {StrategyKind::kCoda};
    if (axis == SweepAxis::kComponents) {
      c.coda.components = v;
    } else {
      c.coda.prompt_length = v;
    }
    c.output_dir = (std::filesystem::path(base.output_dir) /
                    (std::string(axis_name(axis)) + "-" + std::to_string(v)))
                       .string();
    c.cache_dir = base.cache_path().string();
    for (const auto& e : c.violations()) {
      errors.push_back(std::string(axis_name(axis)) + "=" + std::to_string(v) +
                       ": " + e);
    }
    out.push_back(std::move(c));
  }
  if (!errors.empty()) {
    std::string msg = "invalid sweep:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
  return out;
}

inline std::string sweep_csv(SweepAxis axis, const std::vector<SweepPoint>& points) {
  std::ostringstream os;
  os << axis_name(axis) << ",A_N_mean,A_N_std,F_N_mean,F_N_std,trials\n";
  for (const auto& p : points) {
    os << p.value << ',' << format_double(p.avg_acc.mean) << ','
       << format_double(p.avg_acc.std) << ','
       << (p.forgetting ? format_double(p.forgetting->mean) : "") << ','
       << (p.forgetting ? format_double(p.forgetting->std) : "") << ','
       << p.avg_acc.count << '\n';
  }
  return os.str();
}

/// Runs each point with shared seeds and writes sweep-<axis>.csv into
/// base.output_dir (plus a full run directory per point).
inline std::vector<SweepPoint> sweep(const RunConfig& base, SweepAxis axis,
                                     const std::vector<std::size_t>& values,
                                     std::ostream* progress = nullptr) {
  const auto configs = sweep_configs(base, axis, values);
  std::vector<SweepPoint> points;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    if (progress != nullptr) {
      *progress << axis_name(axis) << " = " << values[i] << std::endl;
    }
    const RunReport r = run_experiment(configs[i], {}, progress);
    write_report(r, configs[i].output_dir);
    SweepPoint p;
    p.value = values[i];
    p.avg_acc = r.summary.front().avg_acc;
    p.forgetting = r.summary.front().forgetting;
    points.push_back(p);
  }
  io::write_bytes(std::filesystem::path(base.output_dir) /
                      ("sweep-" + std::string(axis_name(axis)) + ".csv"),
                  sweep_csv(axis, points));
  return points;
}

}  // namespace coda
