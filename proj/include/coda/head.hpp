// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The coda-prompt authors.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

#include "coda/autograd.hpp"
#include "coda/optim.hpp"
#include "coda/random.hpp"
#include "coda/tensor.hpp"

namespace coda {

/// Linear classifier over all classes seen so far. Row c of the weight
/// matrix scores global label c.
class ClassifierHead {
 public:
  ClassifierHead() = default;
  explicit ClassifierHead(std::size_t embed_dim)
      : embed_dim_(embed_dim), weight_({0, embed_dim}), bias_({0}) {
    weight_.set_requires_grad(true);
    bias_.set_requires_grad(true);
  }

  std::size_t embed_dim() const noexcept { return embed_dim_; }
  std::size_t num_classes() const noexcept { return bias_.size(); }
  const std::vector<std::pair<std::size_t, std::size_t>>& task_ranges() const {
    return ranges_;
  }

  Tensor& weight() noexcept { return weight_; }
  Tensor& bias() noexcept { return bias_; }
  const Tensor& weight() const noexcept { return weight_; }
  const Tensor& bias() const noexcept { return bias_; }

  /// Appends rows for `count` new classes: weights uniform in
  /// [-1/sqrt(D), 1/sqrt(D)] drawn from `seed`, biases zero. Earlier rows are
  /// kept bitwise.
  void add_task(std::size_t count, std::uint64_t seed) {
    const std::size_t old = num_classes();
    const std::size_t d = embed_dim_;
    Rng rng(seed);
    const double a = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> w(weight_.values());
    for (std::size_t i = 0; i < count * d; ++i) w.push_back(rng.uniform(-a, a));
    std::vector<double> b(bias_.values());
    b.resize(old + count, 0.0);
    weight_ = Tensor({old + count, d}, std::move(w));
    bias_ = Tensor({old + count}, std::move(b));
    weight_.set_requires_grad(true);
    bias_.set_requires_grad(true);
    ranges_.emplace_back(old, old + count);
  }

  /// Restores a saved head.
  void assign(Tensor weight, Tensor bias,
              std::vector<std::pair<std::size_t, std::size_t>> ranges) {
    if (weight.rank() != 2 || weight.dim(1) != embed_dim_ ||
        bias.size() != weight.dim(0)) {
      throw DimensionError("classifier head shapes do not match");
    }
    weight_ = std::move(weight);
    bias_ = std::move(bias);
    weight_.set_requires_grad(true);
    bias_.set_requires_grad(true);
    ranges_ = std::move(ranges);
  }

  /// features [B x D] -> logits [B x C].
  Var forward(Tape& tape, Var features) {
    Var w = tape.leaf(weight_);
    Var b = tape.leaf(bias_);
    return add_broadcast(matmul(features, transpose(w)), b);
  }

  /// Weight and bias rows of one task.
  std::vector<ParamSlot> task_slots(std::size_t task) {
    const auto [b, e] = ranges_.at(task);
    return {rows(weight_, b, e), rows(bias_, b, e)};
  }

  std::size_t parameter_count() const { return weight_.size() + bias_.size(); }

  /// L2 norm of the accumulated gradient on rows below `end`.
  double grad_norm_below(std::size_t end) const {
    double s = 0.0;
    if (weight_.grad()) {
      for (std::size_t i = 0; i < end * embed_dim_; ++i) {
        s += (*weight_.grad())[i] * (*weight_.grad())[i];
      }
    }
    if (bias_.grad()) {
      for (std::size_t i = 0; i < end; ++i) s += (*bias_.grad())[i] * (*bias_.grad())[i];
    }
    return std::sqrt(s);
  }

  void zero_grad() {
    weight_.zero_grad();
    bias_.zero_grad();
  }

 private:
  std::size_t embed_dim_ = 0;
  Tensor weight_;
  Tensor bias_;
  std::vector<std::pair<std::size_t, std::size_t>> ranges_;
};

/// Index of the largest entry of each row; ties go to the lowest index.
inline std::vector<std::size_t> argmax_rows(const Tensor& scores) {
  const std::size_t n = scores.dim(0);
  std::vector<std::size_t> out(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = scores.row(i);
    for (std::size_t j = 1; j < row.size(); ++j) {
      if (row[j] > row[out[i]]) out[i] = j;
    }
  }
  return out;
}

}  // namespace coda
