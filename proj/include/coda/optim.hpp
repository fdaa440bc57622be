// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The coda-prompt authors.

#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <vector>

#include "coda/tensor.hpp"

namespace coda {

/// Rows [row_begin, row_end) along axis 0 of a tensor that an optimizer may
/// update. Everything outside the range is left bitwise untouched.
struct ParamSlot {
  Tensor* tensor = nullptr;
  std::size_t row_begin = 0;
  std::size_t row_end = 0;

  std::size_t row_size() const { return tensor->row_size(); }
  std::size_t count() const { return (row_end - row_begin) * row_size(); }
};

inline ParamSlot whole(Tensor& t) {
  return ParamSlot{&t, 0, t.rank() == 0 ? 1 : t.dim(0)};
}

inline ParamSlot rows(Tensor& t, std::size_t begin, std::size_t end) {
  if (begin > end || end > t.dim(0)) {
    throw DimensionError("parameter rows [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") out of range for " +
                         to_string(t.shape()));
  }
  return ParamSlot{&t, begin, end};
}

/// base * (1 + cos(pi * step / total)) / 2
inline double cosine_decay(double base, std::size_t step, std::size_t total) {
  if (total == 0) return base;
  const double progress =
      static_cast<double>(step) / static_cast<double>(total);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool cosine = true;
};

class Adam {
 public:
  Adam(std::vector<ParamSlot> slots, AdamConfig config,
       std::size_t total_steps)
      : slots_(std::move(slots)), config_(config), total_steps_(total_steps) {
    for (const auto& s : slots_) {
      first_.emplace_back(s.count(), 0.0);
      second_.emplace_back(s.count(), 0.0);
    }
  }

  double current_lr() const {
    return config_.cosine ? cosine_decay(config_.lr, step_, total_steps_)
                          : config_.lr;
  }

  std::size_t steps() const noexcept { return step_; }

  std::size_t moment_size() const {
    std::size_t n = 0;
    for (const auto& m : first_) n += m.size();
    return n;
  }

  /// One update from the gradients currently held by the slot tensors.
  /// Tensors without a gradient buffer are treated as having zero gradient.
  void step() {
    const double lr = current_lr();
    ++step_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      const ParamSlot& s = slots_[i];
      const std::size_t offset = s.row_begin * s.row_size();
      auto values = s.tensor->data();
      const auto& grad = s.tensor->grad();
      auto& m = first_[i];
      auto& v = second_[i];
      for (std::size_t j = 0; j < m.size(); ++j) {
        const double g = grad ? (*grad)[offset + j] : 0.0;
        m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g;
        v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g * g;
        const double delta =
            lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + config_.eps);
        if (delta != 0.0) values[offset + j] -= delta;
      }
    }
  }

  void zero_grad() {
    for (const auto& s : slots_) s.tensor->zero_grad();
  }

 private:
  std::vector<ParamSlot> slots_;
  AdamConfig config_;
  std::size_t total_steps_;
  std::size_t step_ = 0;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
};

}  // namespace coda
