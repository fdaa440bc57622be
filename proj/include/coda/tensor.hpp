// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The coda-prompt authors.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace coda {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not satisfy an operation's contract.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or benchmark construction.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or an undefined numeric result.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// An operation was called on an object in the wrong state.
class StateError : public Error {
 public:
  using Error::Error;
};

/// File or container-format failure.
class IoError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major tensor of 64-bit values.
///
/// A tensor optionally owns a gradient buffer of identical size. The buffer
/// only ever exists when requires_grad() is true.
class Tensor {
 public:
  Tensor() : shape_{0} {}

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel(shape_) != data_.size()) {
      throw DimensionError("tensor shape " + coda::to_string(shape_) +
                           " does not match data length " +
                           std::to_string(data_.size()));
    }
  }

  static Tensor scalar(double value) { return Tensor(Shape{}, {value}); }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1.0;
    return t;
  }

  static Tensor from_rows(
      std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged rows in from_rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& operator()(std::size_t i, std::size_t j) {
    return data_[i * shape_[1] + j];
  }
  double operator()(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }
  double& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  /// Number of scalars in one slice along the leading axis.
  std::size_t row_size() const {
    return shape_.empty() || shape_[0] == 0 ? 0 : data_.size() / shape_[0];
  }

  std::span<double> row(std::size_t i) {
    const std::size_t n = row_size();
    return std::span<double>(data_).subspan(i * n, n);
  }
  std::span<const double> row(std::size_t i) const {
    const std::size_t n = row_size();
    return std::span<const double>(data_).subspan(i * n, n);
  }

  double item() const {
    if (data_.size() != 1) {
      throw DimensionError("item() on tensor of shape " +
                           coda::to_string(shape_));
    }
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (numel(shape) != data_.size()) {
      throw DimensionError("cannot reshape " + coda::to_string(shape_) +
                           " to " + coda::to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  bool requires_grad() const noexcept { return requires_grad_; }

  void set_requires_grad(bool value) {
    requires_grad_ = value;
    if (!value) grad_.reset();
  }

  const std::optional<std::vector<double>>& grad() const noexcept {
    return grad_;
  }

  /// Adds g into the gradient buffer. No-op when requires_grad() is false.
  void accumulate_grad(std::span<const double> g) {
    if (!requires_grad_) return;
    if (g.size() != data_.size()) {
      throw DimensionError("gradient length " + std::to_string(g.size()) +
                           " does not match tensor " + coda::to_string(shape_));
    }
    if (!grad_) grad_.emplace(data_.size(), 0.0);
    auto& buf = *grad_;
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
  }

  /// Mutable view of the gradient buffer; empty when no gradient exists.
  std::span<double> grad_data() noexcept {
    return grad_ ? std::span<double>(*grad_) : std::span<double>();
  }

  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
  }

  void clear_grad() noexcept { grad_.reset(); }

 private:
  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
  std::optional<std::vector<double>> grad_;
};

/// Shape and every bit of the payload agree.
inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         (a.size() == 0 ||
          std::memcmp(a.data().data(), b.data().data(),
                      a.size() * sizeof(double)) == 0);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff: shapes " + to_string(a.shape()) +
                         " and " + to_string(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(a[i] - b[i]));
  }
  return m;
}

inline bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(),
                     [](double v) { return std::isfinite(v); });
}

}  // namespace coda
