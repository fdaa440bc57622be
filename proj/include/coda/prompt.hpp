// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The coda-prompt authors.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "coda/autograd.hpp"
#include "coda/optim.hpp"
#include "coda/random.hpp"
#include "coda/tensor.hpp"
#include "coda/vit.hpp"

namespace coda {

// ---------------------------------------------------------------------------
// Strategies

enum class StrategyKind { kCoda, kPoolTopK, kPerTask, kFineTune };

inline std::string_view strategy_name(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::kCoda: return "coda";
    case StrategyKind::kPoolTopK: return "l2p";
    case StrategyKind::kPerTask: return "dualprompt";
    case StrategyKind::kFineTune: return "ft";
  }
  return "unknown";
}

inline std::optional<StrategyKind> parse_strategy(std::string_view s) {
  if (s == "coda") return StrategyKind::kCoda;
  if (s == "l2p" || s == "pool" || s == "pool_topk") {
    return StrategyKind::kPoolTopK;
  }
  if (s == "dualprompt" || s == "per_task") return StrategyKind::kPerTask;
  if (s == "ft" || s == "none" || s == "finetune") {
    return StrategyKind::kFineTune;
  }
  return std::nullopt;
}

/// Decomposed-prompt hyperparameters.
struct BankConfig {
  std::size_t components = 20;
  std::size_t prompt_length = 4;
  double ortho_weight = 0.1;
  /// false: weights are plain cosine(q, K_m), without attention vectors.
  bool attention = true;
  /// false: components of past tasks stay trainable.
  bool freezing = true;
  /// true: components not yet reached by the schedule get weight 0.
  bool mask_future = false;

  std::vector<std::string> violations(std::size_t num_tasks) const {
    std::vector<std::string> out;
    if (components == 0) out.push_back("coda.components must be positive");
    if (num_tasks > 0 && components % num_tasks != 0) {
      out.push_back("coda.components (" + std::to_string(components) +
                    ") must be divisible by the number of tasks (" +
                    std::to_string(num_tasks) + ")");
    }
    if (prompt_length == 0 || prompt_length % 2 != 0) {
      out.push_back("coda.prompt_length must be positive and even");
    }
    if (!(ortho_weight >= 0.0) || !std::isfinite(ortho_weight)) {
      out.push_back("coda.lambda must be finite and non-negative");
    }
    return out;
  }

  bool operator==(const BankConfig&) const = default;
};

/// Half-open component index range.
struct ComponentRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  bool operator==(const ComponentRange&) const = default;
};

/// Components of one prompted layer: prompts [M x L_p x D], keys [M x D],
/// attention vectors [M x D].
struct ComponentSet {
  Tensor prompts;
  Tensor keys;
  Tensor attention;
};

/// The expanding set of prompt components of every prompted layer.
///
/// All M components exist from construction. expand() moves the boundary
/// between frozen and trainable components; components past the current
/// task's range keep their initial values until their task arrives.
class PromptBank {
 public:
  PromptBank() = default;

  PromptBank(BankConfig config, std::vector<std::size_t> layers,
             std::size_t embed_dim, std::uint64_t seed)
      : config_(config), layers_(std::move(layers)), embed_dim_(embed_dim) {
    if (config_.components == 0 || config_.prompt_length % 2 != 0 ||
        config_.prompt_length == 0 || embed_dim == 0) {
      throw ConfigError(
          "prompt bank needs M > 0, an even prompt length and D > 0");
    }
    const double a = 1.0 / std::sqrt(static_cast<double>(embed_dim));
    const std::size_t m = config_.components;
    for (std::size_t layer : layers_) {
      Rng rng(derive_seed(seed, Stream::kBankInit, {layer}));
      ComponentSet s;
      s.prompts = uniform_tensor({m, config_.prompt_length, embed_dim}, -a, a,
                                 rng);
      s.keys = uniform_tensor({m, embed_dim}, -a, a, rng);
      s.attention = uniform_tensor({m, embed_dim}, -a, a, rng);
      for (Tensor* t : {&s.prompts, &s.keys, &s.attention}) {
        t->set_requires_grad(true);
      }
      sets_.push_back(std::move(s));
    }
  }

  const BankConfig& config() const noexcept { return config_; }
  std::size_t components() const noexcept { return config_.components; }
  std::size_t prompt_length() const noexcept { return config_.prompt_length; }
  std::size_t embed_dim() const noexcept { return embed_dim_; }
  const std::vector<std::size_t>& layers() const noexcept { return layers_; }

  ComponentSet& at(std::size_t layer) { return sets_[position(layer)]; }
  const ComponentSet& at(std::size_t layer) const {
    return sets_[position(layer)];
  }

  std::size_t frozen_count() const noexcept { return frozen_count_; }
  /// One past the last component allocated to the current task.
  std::size_t active_end() const noexcept { return active_end_; }
  ComponentRange trainable_range() const {
    return {frozen_count_, active_end_};
  }
  const std::vector<ComponentRange>& task_schedule() const noexcept {
    return schedule_;
  }

  /// Enters task n (1-based) of N: components [0, (n-1)M/N) freeze and
  /// [(n-1)M/N, nM/N) become trainable.
  void expand(std::size_t task, std::size_t num_tasks) {
    if (num_tasks == 0 || task < 1 || task > num_tasks) {
      throw ConfigError("expand: task " + std::to_string(task) +
                        " outside [1, " + std::to_string(num_tasks) + "]");
    }
    if (config_.components % num_tasks != 0) {
      throw ConfigError("expand: " + std::to_string(config_.components) +
                        " components not divisible by " +
                        std::to_string(num_tasks) + " tasks");
    }
    const std::size_t per_task = config_.components / num_tasks;
    schedule_.clear();
    for (std::size_t t = 0; t < num_tasks; ++t) {
      schedule_.push_back({t * per_task, (t + 1) * per_task});
    }
    active_end_ = task * per_task;
    frozen_count_ = config_.freezing ? (task - 1) * per_task : 0;
  }

  /// Restores schedule state, e.g. from a checkpoint.
  void set_schedule(std::size_t frozen_count, std::size_t active_end,
                    std::vector<ComponentRange> schedule) {
    if (frozen_count > active_end || active_end > config_.components) {
      throw ConfigError("inconsistent prompt bank schedule");
    }
    frozen_count_ = frozen_count;
    active_end_ = active_end;
    schedule_ = std::move(schedule);
  }

  std::vector<std::pair<std::string, Tensor*>> named_parameters() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string p = "bank." + std::to_string(layers_[i]) + ".";
      out.push_back({p + "P", &sets_[i].prompts});
      out.push_back({p + "K", &sets_[i].keys});
      out.push_back({p + "A", &sets_[i].attention});
    }
    return out;
  }

  /// Parameters that take part in the forward computation. Attention
  /// vectors are excluded when attention is ablated.
  std::size_t parameter_count() const {
    const std::size_t m = config_.components;
    const std::size_t d = embed_dim_;
    const std::size_t per_layer = m * config_.prompt_length * d + m * d +
                                  (config_.attention ? m * d : 0);
    return per_layer * layers_.size();
  }

  std::vector<ParamSlot> trainable_slots() {
    std::vector<ParamSlot> out;
    for (auto& s : sets_) {
      out.push_back(rows(s.prompts, frozen_count_, active_end_));
      out.push_back(rows(s.keys, frozen_count_, active_end_));
      if (config_.attention) {
        out.push_back(rows(s.attention, frozen_count_, active_end_));
      }
    }
    return out;
  }

  struct BoundLayer {
    Var prompts;
    Var keys;
    Var attention;
  };

  std::vector<BoundLayer> bind(Tape& tape) {
    std::vector<BoundLayer> out;
    for (auto& s : sets_) {
      BoundLayer b{tape.leaf(s.prompts), tape.leaf(s.keys), {}};
      b.attention = config_.attention
                        ? tape.leaf(s.attention)
                        : tape.constant(Tensor(s.attention.shape(), 1.0));
      out.push_back(b);
    }
    return out;
  }

  /// Component weights [B x M] for queries [B x D]:
  /// alpha[b, m] = cos(q_b * A_m, K_m).
  Var alpha(Tape& tape, const BoundLayer& b, Var queries) const {
    Var a = attended_cosine(queries, b.attention, b.keys);
    if (!config_.mask_future) return a;
    Tensor mask(a.shape());
    const std::size_t m = config_.components;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      mask[i] = (i % m) < active_end_ ? 1.0 : 0.0;
    }
    return a * tape.constant(std::move(mask));
  }

  /// p_b = sum_m alpha[b, m] P_m, as [B x L_p x D].
  Var assemble(Var alpha, const BoundLayer& b) const {
    const std::size_t m = config_.components;
    const std::size_t lp = config_.prompt_length;
    if (alpha.shape().size() != 2 || alpha.shape()[1] != m) {
      throw DimensionError("assemble: weights " + to_string(alpha.shape()) +
                           " do not match " + std::to_string(m) +
                           " components");
    }
    const std::size_t batch = alpha.shape()[0];
    return reshape(matmul(alpha, reshape(b.prompts, {m, lp * embed_dim_})),
                   {batch, lp, embed_dim_});
  }

  /// Sum over layers of the orthogonality penalties of P (components
  /// flattened to rows), K and, when used, A.
  Var ortho_penalty(Tape& tape, const std::vector<BoundLayer>& bound) const;

 private:
  std::size_t position(std::size_t layer) const {
    auto it = std::find(layers_.begin(), layers_.end(), layer);
    if (it == layers_.end()) {
      throw ConfigError("layer " + std::to_string(layer) +
                        " carries no prompt components");
    }
    return static_cast<std::size_t>(it - layers_.begin());
  }

  BankConfig config_;
  std::vector<std::size_t> layers_;
  std::size_t embed_dim_ = 0;
  std::vector<ComponentSet> sets_;
  std::size_t frozen_count_ = 0;
  std::size_t active_end_ = 0;
  std::vector<ComponentRange> schedule_;
};

/// ||B B^T - I||_F for a matrix B with R rows.
inline Var ortho_loss(Var b) {
  if (b.shape().size() != 2) {
    throw DimensionError("ortho_loss expects a matrix, got " +
                         to_string(b.shape()));
  }
  Tape& tape = *b.tape();
  Var gram = matmul(b, transpose(b));
  return frobenius_norm(gram - tape.constant(Tensor::identity(b.shape()[0])));
}

inline double ortho_loss(const Tensor& b) {
  Tape tape;
  return ortho_loss(tape.constant(b)).value().item();
}

inline Var PromptBank::ortho_penalty(Tape& tape,
                                     const std::vector<BoundLayer>& bound) const {
  const std::size_t m = config_.components;
  std::vector<Var> terms;
  for (const auto& b : bound) {
    terms.push_back(ortho_loss(
        reshape(b.prompts, {m, config_.prompt_length * embed_dim_})));
    terms.push_back(ortho_loss(b.keys));
    if (config_.attention) terms.push_back(ortho_loss(b.attention));
  }
  if (terms.empty()) return tape.constant(Tensor::scalar(0.0));
  Var total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = total + terms[i];
  return total;
}

/// Weights of all components of one layer for a single query q [D] -> [M].
inline Tensor weight_alpha(const Tensor& q, PromptBank& bank,
                           std::size_t layer) {
  if (q.rank() != 1 || q.dim(0) != bank.embed_dim()) {
    throw DimensionError("weight_alpha: query " + to_string(q.shape()) +
                         " does not match embedding size " +
                         std::to_string(bank.embed_dim()));
  }
  Tape tape;
  const auto bound = bank.bind(tape);
  const std::size_t i = static_cast<std::size_t>(
      std::find(bank.layers().begin(), bank.layers().end(), layer) -
      bank.layers().begin());
  bank.at(layer);  // throws for an unknown layer
  Var a = bank.alpha(tape, bound[i], tape.constant(q.reshaped({1, q.dim(0)})));
  return a.value().reshaped({bank.components()});
}

/// p = sum_m alpha_m P_m for one layer -> [L_p x D].
inline Tensor assemble_prompt(const Tensor& alpha, PromptBank& bank,
                              std::size_t layer) {
  if (alpha.rank() != 1 || alpha.dim(0) != bank.components()) {
    throw DimensionError("assemble_prompt: weights " +
                         to_string(alpha.shape()) + " do not match " +
                         std::to_string(bank.components()) + " components");
  }
  bank.at(layer);
  Tape tape;
  const auto bound = bank.bind(tape);
  const std::size_t i = static_cast<std::size_t>(
      std::find(bank.layers().begin(), bank.layers().end(), layer) -
      bank.layers().begin());
  Var p = bank.assemble(tape.constant(alpha.reshaped({1, alpha.dim(0)})),
                        bound[i]);
  return p.value().reshaped({bank.prompt_length(), bank.embed_dim()});
}

/// True iff, under the same query, every weight of a component below
/// before.frozen_count() is bitwise identical between the two banks.
inline bool alpha_expansion_invariance_check(PromptBank& before,
                                             PromptBank& after,
                                             const Tensor& q) {
  const std::size_t frozen = before.frozen_count();
  for (std::size_t layer : before.layers()) {
    const Tensor a0 = weight_alpha(q, before, layer);
    const Tensor a1 = weight_alpha(q, after, layer);
    if (a0.size() < frozen || a1.size() < frozen) return false;
    if (std::memcmp(a0.data().data(), a1.data().data(),
                    frozen * sizeof(double)) != 0) {
      return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Key-query baselines

/// Indices of the k keys most cosine-similar to q, best first; ties go to the
/// lower index.
inline std::vector<std::size_t> topk_by_cosine(std::span<const double> q,
                                               const Tensor& keys,
                                               std::size_t k) {
  const std::size_t n = keys.dim(0);
  if (n == 0) throw ConfigError("key-query selection over an empty pool");
  if (k == 0 || k > n) {
    throw ConfigError("cannot select " + std::to_string(k) + " of " +
                      std::to_string(n) + " prompts");
  }
  std::vector<double> sims(n);
  for (std::size_t i = 0; i < n; ++i) sims[i] = cosine_similarity(q, keys.row(i));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&sims](std::size_t a, std::size_t b) {
                     return sims[a] > sims[b];
                   });
  order.resize(k);
  return order;
}

struct PoolSelection {
  /// [(k * L_p) x D]: the key halves of the selected prompts in rank order,
  /// followed by their value halves, ready for prefix attention.
  Tensor prompt;
  std::vector<std::size_t> indices;
};

inline PoolSelection pool_topk_select(const Tensor& q, const Tensor& pool_keys,
                                      const Tensor& pool_prompts,
                                      std::size_t k) {
  if (pool_keys.rank() != 2 || pool_prompts.rank() != 3 ||
      pool_keys.dim(0) != pool_prompts.dim(0) ||
      q.size() != pool_keys.dim(1) || pool_prompts.dim(1) % 2 != 0) {
    throw DimensionError("pool_topk_select: incompatible pool shapes");
  }
  PoolSelection sel;
  sel.indices = topk_by_cosine(q.data(), pool_keys, k);
  const std::size_t half = pool_prompts.dim(1) / 2;
  const std::size_t d = pool_prompts.dim(2);
  sel.prompt = Tensor({k * 2 * half, d});
  std::size_t row = 0;
  for (std::size_t part = 0; part < 2; ++part) {
    for (std::size_t idx : sel.indices) {
      for (std::size_t r = 0; r < half; ++r, ++row) {
        for (std::size_t j = 0; j < d; ++j) {
          sel.prompt(row, j) = pool_prompts(idx, part * half + r, j);
        }
      }
    }
  }
  return sel;
}

/// mean over rows of (1 - cos(q_i, key_i)); queries are constants.
inline Var key_pull_loss(Var queries, Var matched_keys) {
  Tape& tape = *matched_keys.tape();
  Var c = cosine_rows(queries, matched_keys);
  return tape.constant(Tensor::scalar(1.0)) - mean(c);
}

/// Plain-value form for one query q [D] and matched keys [n x D].
inline double key_pull_loss(const Tensor& q, const Tensor& matched_keys) {
  if (matched_keys.rank() != 2 || matched_keys.dim(0) == 0) {
    throw DimensionError("key_pull_loss needs at least one matched key");
  }
  Tape tape;
  const std::size_t n = matched_keys.dim(0);
  Tensor qs({n, q.size()});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(q.data().begin(), q.data().end(), qs.row(i).begin());
  }
  return key_pull_loss(tape.constant(std::move(qs)),
                       tape.constant(matched_keys))
      .value()
      .item();
}

/// Training-time per-task selection: the prompt of the given task.
inline Tensor per_task_select(std::size_t task_id, const Tensor& task_prompts) {
  if (task_id >= task_prompts.dim(0)) {
    throw ConfigError("unknown task id " + std::to_string(task_id));
  }
  Tensor out({task_prompts.dim(1), task_prompts.dim(2)});
  std::copy(task_prompts.row(task_id).begin(), task_prompts.row(task_id).end(),
            out.data().begin());
  return out;
}

/// Inference-time per-task selection: the prompt whose key is closest to q.
inline Tensor per_task_select(const Tensor& q, const Tensor& task_prompts,
                              const Tensor& task_keys) {
  return per_task_select(topk_by_cosine(q.data(), task_keys, 1).front(),
                         task_prompts);
}

// ---------------------------------------------------------------------------
// Strategy objects used by the training harness

/// Prompts for one batch plus the strategy's auxiliary loss (training only).
struct Prompting {
  LayerPrompts prompts;
  std::optional<Var> aux_loss;
};

class PromptStrategy {
 public:
  virtual ~PromptStrategy() = default;
  virtual StrategyKind kind() const = 0;
  /// Enters task `task` (0-based) of `num_tasks`.
  virtual void begin_task(std::size_t task, std::size_t num_tasks) = 0;
  /// queries: [B x D] frozen-encoder embeddings. train_task is set during
  /// training and absent at inference.
  virtual Prompting prompt(Tape& tape, const Tensor& queries,
                           std::optional<std::size_t> train_task) = 0;
  virtual std::vector<ParamSlot> trainable_slots() = 0;
  virtual std::vector<std::pair<std::string, Tensor*>> named_parameters() = 0;
  virtual std::size_t parameter_count() const = 0;
  /// Parameters unlocked at some point of the run.
  virtual std::size_t trainable_parameter_count() const {
    return parameter_count();
  }
  virtual std::unique_ptr<PromptStrategy> clone() const = 0;
};

class CodaStrategy final : public PromptStrategy {
 public:
  CodaStrategy(BankConfig config, std::vector<std::size_t> layers,
               std::size_t embed_dim, std::uint64_t seed)
      : bank_(config, std::move(layers), embed_dim, seed) {}

  StrategyKind kind() const override { return StrategyKind::kCoda; }
  PromptBank& bank() { return bank_; }
  const PromptBank& bank() const { return bank_; }

  void begin_task(std::size_t task, std::size_t num_tasks) override {
    bank_.expand(task + 1, num_tasks);
  }

  Prompting prompt(Tape& tape, const Tensor& queries,
                   std::optional<std::size_t> train_task) override {
    Prompting out;
    const auto bound = bank_.bind(tape);
    Var q = tape.constant(queries);
    for (std::size_t i = 0; i < bound.size(); ++i) {
      Var a = bank_.alpha(tape, bound[i], q);
      out.prompts[bank_.layers()[i]] = bank_.assemble(a, bound[i]);
    }
    if (train_task && bank_.config().ortho_weight > 0.0) {
      out.aux_loss =
          scale(bank_.ortho_penalty(tape, bound), bank_.config().ortho_weight);
    }
    return out;
  }

  std::vector<ParamSlot> trainable_slots() override {
    return bank_.trainable_slots();
  }
  std::vector<std::pair<std::string, Tensor*>> named_parameters() override {
    return bank_.named_parameters();
  }
  std::size_t parameter_count() const override {
    return bank_.parameter_count();
  }
  std::unique_ptr<PromptStrategy> clone() const override {
    return std::make_unique<CodaStrategy>(*this);
  }

 private:
  PromptBank bank_;
};

struct PoolConfig {
  std::size_t pool_size = 10;
  std::size_t top_k = 2;
  std::size_t prompt_length = 4;
  double pull_weight = 0.5;

  std::vector<std::string> violations() const {
    std::vector<std::string> out;
    if (pool_size == 0) out.push_back("l2p.pool_size must be positive");
    if (top_k == 0 || top_k > pool_size) {
      out.push_back("l2p.top_k must be in [1, pool_size]");
    }
    if (prompt_length == 0 || prompt_length % 2 != 0) {
      out.push_back("l2p.prompt_length must be positive and even");
    }
    if (!(pull_weight >= 0.0)) out.push_back("l2p.pull_weight must be >= 0");
    return out;
  }
  bool operator==(const PoolConfig&) const = default;
};

namespace detail {

// Gathers per-image selected prompts [B*k] rows of a [n x L_p x D] pool into
// a [B x k*L_p x D] prefix (key halves first, then value halves).
inline Var gather_prefix(Var pool, const std::vector<std::size_t>& flat_indices,
                         std::size_t batch, std::size_t k) {
  const std::size_t lp = pool.shape()[1];
  const std::size_t d = pool.shape()[2];
  Var picked = reshape(index_select(pool, flat_indices),
                       {batch, k, 2, lp / 2, d});
  return reshape(permute(picked, {0, 2, 1, 3, 4}), {batch, k * lp, d});
}

inline Var repeated_queries(Tape& tape, const Tensor& queries,
                            std::size_t times) {
  const std::size_t batch = queries.dim(0);
  const std::size_t d = queries.dim(1);
  Tensor out({batch * times, d});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t j = 0; j < times; ++j) {
      std::copy(queries.row(b).begin(), queries.row(b).end(),
                out.row(b * times + j).begin());
    }
  }
  return tape.constant(std::move(out));
}

}  // namespace detail

/// Pool of prompts with keys; each input uses its top-k keys' prompts, and
/// keys are trained separately by pulling them toward matched queries.
class PoolStrategy final : public PromptStrategy {
 public:
  PoolStrategy(PoolConfig config, std::vector<std::size_t> layers,
               std::size_t embed_dim, std::uint64_t seed)
      : config_(config), layers_(std::move(layers)) {
    const auto v = config_.violations();
    if (!v.empty()) throw ConfigError(v.front());
    const double a = 1.0 / std::sqrt(static_cast<double>(embed_dim));
    Rng rng(derive_seed(seed, Stream::kPoolInit));
    keys_ = uniform_tensor({config_.pool_size, embed_dim}, -a, a, rng);
    keys_.set_requires_grad(true);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      prompts_.push_back(uniform_tensor(
          {config_.pool_size, config_.prompt_length, embed_dim}, -a, a, rng));
      prompts_.back().set_requires_grad(true);
    }
  }

  StrategyKind kind() const override { return StrategyKind::kPoolTopK; }
  const Tensor& keys() const { return keys_; }
  const Tensor& prompts(std::size_t i) const { return prompts_.at(i); }

  void begin_task(std::size_t, std::size_t) override {}

  Prompting prompt(Tape& tape, const Tensor& queries,
                   std::optional<std::size_t> train_task) override {
    const std::size_t batch = queries.dim(0);
    const std::size_t k = config_.top_k;
    std::vector<std::size_t> flat;
    flat.reserve(batch * k);
    for (std::size_t b = 0; b < batch; ++b) {
      auto idx = topk_by_cosine(queries.row(b), keys_, k);
      flat.insert(flat.end(), idx.begin(), idx.end());
    }
    Prompting out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      out.prompts[layers_[i]] =
          detail::gather_prefix(tape.leaf(prompts_[i]), flat, batch, k);
    }
    if (train_task && config_.pull_weight > 0.0) {
      Var matched = index_select(tape.leaf(keys_), flat);
      out.aux_loss = scale(
          key_pull_loss(detail::repeated_queries(tape, queries, k), matched),
          config_.pull_weight);
    }
    return out;
  }

  std::vector<ParamSlot> trainable_slots() override {
    std::vector<ParamSlot> out{whole(keys_)};
    for (auto& p : prompts_) out.push_back(whole(p));
    return out;
  }

  std::vector<std::pair<std::string, Tensor*>> named_parameters() override {
    std::vector<std::pair<std::string, Tensor*>> out{{"pool.keys", &keys_}};
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      out.push_back({"pool." + std::to_string(layers_[i]) + ".P", &prompts_[i]});
    }
    return out;
  }

  std::size_t parameter_count() const override {
    std::size_t n = keys_.size();
    for (const auto& p : prompts_) n += p.size();
    return n;
  }

  std::unique_ptr<PromptStrategy> clone() const override {
    return std::make_unique<PoolStrategy>(*this);
  }

 private:
  PoolConfig config_;
  std::vector<std::size_t> layers_;
  Tensor keys_;
  std::vector<Tensor> prompts_;
};

struct PerTaskConfig {
  std::size_t prompt_length = 8;
  double pull_weight = 0.5;

  std::vector<std::string> violations() const {
    std::vector<std::string> out;
    if (prompt_length == 0 || prompt_length % 2 != 0) {
      out.push_back("dualprompt.prompt_length must be positive and even");
    }
    if (!(pull_weight >= 0.0)) {
      out.push_back("dualprompt.pull_weight must be >= 0");
    }
    return out;
  }
  bool operator==(const PerTaskConfig&) const = default;
};

/// One prompt and key per task. Training uses the task id; inference picks
/// the seen task whose key best matches the query.
class PerTaskStrategy final : public PromptStrategy {
 public:
  PerTaskStrategy(PerTaskConfig config, std::vector<std::size_t> layers,
                  std::size_t embed_dim, std::size_t num_tasks,
                  std::uint64_t seed)
      : config_(config), layers_(std::move(layers)) {
    const auto v = config_.violations();
    if (!v.empty()) throw ConfigError(v.front());
    const double a = 1.0 / std::sqrt(static_cast<double>(embed_dim));
    Rng rng(derive_seed(seed, Stream::kPoolInit));
    keys_ = uniform_tensor({num_tasks, embed_dim}, -a, a, rng);
    keys_.set_requires_grad(true);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      prompts_.push_back(uniform_tensor(
          {num_tasks, config_.prompt_length, embed_dim}, -a, a, rng));
      prompts_.back().set_requires_grad(true);
    }
  }

  StrategyKind kind() const override { return StrategyKind::kPerTask; }
  const Tensor& keys() const { return keys_; }
  std::size_t tasks_seen() const { return seen_; }

  void begin_task(std::size_t task, std::size_t num_tasks) override {
    if (num_tasks != keys_.dim(0) || task >= num_tasks) {
      throw ConfigError("per-task prompts were sized for " +
                        std::to_string(keys_.dim(0)) + " tasks");
    }
    current_ = task;
    seen_ = std::max(seen_, task + 1);
  }

  void set_progress(std::size_t current, std::size_t seen) {
    current_ = current;
    seen_ = seen;
  }

  Prompting prompt(Tape& tape, const Tensor& queries,
                   std::optional<std::size_t> train_task) override {
    const std::size_t batch = queries.dim(0);
    std::vector<std::size_t> chosen(batch);
    if (train_task) {
      if (*train_task >= keys_.dim(0)) {
        throw ConfigError("unknown task id " + std::to_string(*train_task));
      }
      std::fill(chosen.begin(), chosen.end(), *train_task);
    } else {
      if (seen_ == 0) throw StateError("no task has been trained yet");
      Tensor seen_keys({seen_, keys_.dim(1)});
      std::copy_n(keys_.data().begin(), seen_keys.size(),
                  seen_keys.data().begin());
      for (std::size_t b = 0; b < batch; ++b) {
        chosen[b] = topk_by_cosine(queries.row(b), seen_keys, 1).front();
      }
    }
    Prompting out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      out.prompts[layers_[i]] =
          detail::gather_prefix(tape.leaf(prompts_[i]), chosen, batch, 1);
    }
    if (train_task && config_.pull_weight > 0.0) {
      Var matched = index_select(tape.leaf(keys_), chosen);
      out.aux_loss = scale(key_pull_loss(tape.constant(queries), matched),
                           config_.pull_weight);
    }
    return out;
  }

  std::vector<ParamSlot> trainable_slots() override {
    std::vector<ParamSlot> out{rows(keys_, current_, current_ + 1)};
    for (auto& p : prompts_) out.push_back(rows(p, current_, current_ + 1));
    return out;
  }

  std::vector<std::pair<std::string, Tensor*>> named_parameters() override {
    std::vector<std::pair<std::string, Tensor*>> out{{"task.keys", &keys_}};
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      out.push_back({"task." + std::to_string(layers_[i]) + ".P", &prompts_[i]});
    }
    return out;
  }

  std::size_t parameter_count() const override {
    std::size_t n = keys_.size();
    for (const auto& p : prompts_) n += p.size();
    return n;
  }

  std::unique_ptr<PromptStrategy> clone() const override {
    return std::make_unique<PerTaskStrategy>(*this);
  }

 private:
  PerTaskConfig config_;
  std::vector<std::size_t> layers_;
  Tensor keys_;
  std::vector<Tensor> prompts_;
  std::size_t current_ = 0;
  std::size_t seen_ = 0;
};

/// Fine-tuning baseline: no prompts; the harness trains the encoder itself.
class NoPromptStrategy final : public PromptStrategy {
 public:
  StrategyKind kind() const override { return StrategyKind::kFineTune; }
  void begin_task(std::size_t, std::size_t) override {}
  Prompting prompt(Tape&, const Tensor&, std::optional<std::size_t>) override {
    return {};
  }
  std::vector<ParamSlot> trainable_slots() override { return {}; }
  std::vector<std::pair<std::string, Tensor*>> named_parameters() override {
    return {};
  }
  std::size_t parameter_count() const override { return 0; }
  std::unique_ptr<PromptStrategy> clone() const override {
    return std::make_unique<NoPromptStrategy>(*this);
  }
};

}  // namespace coda
