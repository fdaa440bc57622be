// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The coda-prompt authors.

#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "coda/tensor.hpp"

namespace coda {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode recording of a computation.
///
/// Nodes are appended in evaluation order, so inputs always precede the
/// operations that consume them. backward() walks the nodes in exact reverse
/// recording order. Nodes whose inputs never require a gradient keep no
/// backward rule at all.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::span<const double>)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, nullptr, nullptr, false, {}});
    return Var(this, nodes_.size() - 1);
  }

  /// Records an external parameter. After backward(), its gradient is
  /// accumulated into param when param.requires_grad() is set.
  Var leaf(Tensor& param) {
    const bool needs = param.requires_grad();
    nodes_.push_back(Node{Tensor(param.shape(), param.values()), {}, nullptr,
                          needs ? &param : nullptr,
                          needs, {}});
    return Var(this, nodes_.size() - 1);
  }

  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
    Node node{std::move(value), {}, nullptr, nullptr, false, {}};
    node.inputs.reserve(inputs.size());
    for (const Var& in : inputs) {
      check_owned(in);
      node.inputs.push_back(in.id());
      node.needs_grad = node.needs_grad || nodes_[in.id()].needs_grad;
    }
    if (node.needs_grad) node.backward = std::move(fn);
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
  }

  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(value),
                  std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(fn));
  }

  const Tensor& value(Var v) const {
    check_owned(v);
    return nodes_[v.id()].value;
  }

  bool needs_grad(Var v) const {
    check_owned(v);
    return nodes_[v.id()].needs_grad;
  }

  /// Gradient buffer of v, allocated (zeroed) on first use.
  std::span<double> grad(Var v) {
    check_owned(v);
    Node& n = nodes_[v.id()];
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }

  /// Gradient of v after backward(); empty when nothing flowed into it.
  std::span<const double> grad_view(Var v) const {
    check_owned(v);
    return nodes_[v.id()].grad;
  }

  std::span<const std::size_t> inputs_of(std::size_t id) const {
    return nodes_.at(id).inputs;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Seeds d(root)/d(root) = 1 and propagates to every recorded node.
  void backward(Var root) {
    check_owned(root);
    if (nodes_[root.id()].value.size() != 1) {
      throw DimensionError("backward root must be a scalar, got " +
                           to_string(nodes_[root.id()].value.shape()));
    }
    if (!nodes_[root.id()].needs_grad) return;
    grad(root)[0] += 1.0;
    for (std::size_t id = root.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.grad.empty()) continue;
      if (n.backward) n.backward(*this, n.grad);
      if (n.bound != nullptr) n.bound->accumulate_grad(n.grad);
    }
  }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Tensor* bound;
    bool needs_grad;
    std::vector<double> grad;
  };

  void check_owned(Var v) const {
    if (v.tape() != this || v.id() >= nodes_.size()) {
      throw StateError("variable does not belong to this tape");
    }
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }

namespace detail {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using MatrixMap = Eigen::Map<RowMatrix>;

inline Tape& same_tape(Var a, Var b) {
  if (a.tape() == nullptr || a.tape() != b.tape()) {
    throw StateError("operands recorded on different tapes");
  }
  return *a.tape();
}

inline void require_same_shape(const char* op, const Shape& a,
                               const Shape& b) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a) +
                         " vs " + to_string(b));
  }
}

inline std::size_t checked_axis(const char* op, const Shape& s,
                                std::size_t axis) {
  if (axis >= s.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for " + to_string(s));
  }
  return axis;
}

// outer x n x inner decomposition around an axis.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// Matrix product. `a` may carry leading batch axes, which are flattened
/// into rows: [..., k] x [k, n] -> [..., n].
inline Var matmul(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() != 2 || as.back() != bs[0]) {
    throw DimensionError("matmul: incompatible shapes " + to_string(as) +
                         " and " + to_string(bs));
  }
  const std::size_t k = bs[0];
  const std::size_t n = bs[1];
  const std::size_t m = numel(as) / k;
  Shape out_shape = as;
  out_shape.back() = n;
  Tensor out(out_shape);
  detail::MatrixMap(out.data().data(), m, n).noalias() =
      detail::ConstMatrixMap(a.value().data().data(), m, k) *
      detail::ConstMatrixMap(b.value().data().data(), k, n);
  return tape.record(std::move(out), {a, b},
                     [a, b, m, k, n](Tape& t, std::span<const double> g) {
                       detail::ConstMatrixMap gc(g.data(), m, n);
                       if (t.needs_grad(a)) {
                         detail::MatrixMap(t.grad(a).data(), m, k).noalias() +=
                             gc * detail::ConstMatrixMap(
                                      t.value(b).data().data(), k, n)
                                      .transpose();
                       }
                       if (t.needs_grad(b)) {
                         detail::MatrixMap(t.grad(b).data(), k, n).noalias() +=
                             detail::ConstMatrixMap(t.value(a).data().data(),
                                                    m, k)
                                 .transpose() *
                             gc;
                       }
                     });
}

/// Batched product over the leading axis: [B,m,k] x [B,k,n] -> [B,m,n], or
/// with transpose_b: [B,m,k] x [B,n,k]^T -> [B,m,n].
inline Var bmm(Var a, Var b, bool transpose_b = false) {
  Tape& tape = detail::same_tape(a, b);
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const bool ok = as.size() == 3 && bs.size() == 3 && as[0] == bs[0] &&
                  (transpose_b ? as[2] == bs[2] : as[2] == bs[1]);
  if (!ok) {
    throw DimensionError("bmm: incompatible shapes " + to_string(as) +
                         " and " + to_string(bs));
  }
  const std::size_t batch = as[0];
  const std::size_t m = as[1];
  const std::size_t k = as[2];
  const std::size_t n = transpose_b ? bs[1] : bs[2];
  Tensor out({batch, m, n});
  const double* ap = a.value().data().data();
  const double* bp = b.value().data().data();
  double* op = out.data().data();
  for (std::size_t i = 0; i < batch; ++i) {
    detail::ConstMatrixMap am(ap + i * m * k, m, k);
    detail::MatrixMap om(op + i * m * n, m, n);
    if (transpose_b) {
      om.noalias() = am * detail::ConstMatrixMap(bp + i * n * k, n, k)
                              .transpose();
    } else {
      om.noalias() = am * detail::ConstMatrixMap(bp + i * k * n, k, n);
    }
  }
  return tape.record(
      std::move(out), {a, b},
      [a, b, batch, m, k, n, transpose_b](Tape& t, std::span<const double> g) {
        const double* av = t.value(a).data().data();
        const double* bv = t.value(b).data().data();
        const bool ga_needed = t.needs_grad(a);
        const bool gb_needed = t.needs_grad(b);
        double* ga = ga_needed ? t.grad(a).data() : nullptr;
        double* gb = gb_needed ? t.grad(b).data() : nullptr;
        for (std::size_t i = 0; i < batch; ++i) {
          detail::ConstMatrixMap gc(g.data() + i * m * n, m, n);
          detail::ConstMatrixMap am(av + i * m * k, m, k);
          if (transpose_b) {
            detail::ConstMatrixMap bm(bv + i * n * k, n, k);
            if (ga_needed) {
              detail::MatrixMap(ga + i * m * k, m, k).noalias() += gc * bm;
            }
            if (gb_needed) {
              detail::MatrixMap(gb + i * n * k, n, k).noalias() +=
                  gc.transpose() * am;
            }
          } else {
            detail::ConstMatrixMap bm(bv + i * k * n, k, n);
            if (ga_needed) {
              detail::MatrixMap(ga + i * m * k, m, k).noalias() +=
                  gc * bm.transpose();
            }
            if (gb_needed) {
              detail::MatrixMap(gb + i * k * n, k, n).noalias() +=
                  am.transpose() * gc;
            }
          }
        }
      });
}

inline Var transpose(Var a) {
  const Shape& s = a.shape();
  if (s.size() != 2) {
    throw DimensionError("transpose: expected a matrix, got " + to_string(s));
  }
  const std::size_t r = s[0];
  const std::size_t c = s[1];
  Tensor out({c, r});
  const auto& in = a.value();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = in[i * c + j];
  }
  return a.tape()->record(std::move(out), {a},
                          [a, r, c](Tape& t, std::span<const double> g) {
                            auto ga = t.grad(a);
                            for (std::size_t i = 0; i < r; ++i) {
                              for (std::size_t j = 0; j < c; ++j) {
                                ga[i * c + j] += g[j * r + i];
                              }
                            }
                          });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Var add(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  detail::require_same_shape("add", a.shape(), b.shape());
  Tensor out(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return tape.record(std::move(out), {a, b},
                     [a, b](Tape& t, std::span<const double> g) {
                       for (Var v : {a, b}) {
                         if (!t.needs_grad(v)) continue;
                         auto gv = t.grad(v);
                         for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
                       }
                     });
}

inline Var sub(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  detail::require_same_shape("sub", a.shape(), b.shape());
  Tensor out(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return tape.record(std::move(out), {a, b},
                     [a, b](Tape& t, std::span<const double> g) {
                       if (t.needs_grad(a)) {
                         auto ga = t.grad(a);
                         for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                       }
                       if (t.needs_grad(b)) {
                         auto gb = t.grad(b);
                         for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                       }
                     });
}

inline Var mul(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  detail::require_same_shape("mul", a.shape(), b.shape());
  Tensor out(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return tape.record(std::move(out), {a, b},
                     [a, b](Tape& t, std::span<const double> g) {
                       if (t.needs_grad(a)) {
                         auto ga = t.grad(a);
                         const auto& bv = t.value(b);
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           ga[i] += g[i] * bv[i];
                         }
                       }
                       if (t.needs_grad(b)) {
                         auto gb = t.grad(b);
                         const auto& av = t.value(a);
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           gb[i] += g[i] * av[i];
                         }
                       }
                     });
}

inline Var scale(Var a, double c) {
  Tensor out(a.shape());
  const auto& av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  return a.tape()->record(std::move(out), {a},
                          [a, c](Tape& t, std::span<const double> g) {
                            auto ga = t.grad(a);
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              ga[i] += g[i] * c;
                            }
                          });
}

namespace detail {

inline std::size_t trailing_block(const char* op, const Shape& x,
                                  const Shape& b) {
  bool ok = b.size() <= x.size();
  for (std::size_t i = 0; ok && i < b.size(); ++i) {
    ok = x[x.size() - b.size() + i] == b[i];
  }
  if (!ok) {
    throw DimensionError(std::string(op) + ": " + to_string(b) +
                         " is not a trailing block of " + to_string(x));
  }
  return numel(b);
}

}  // namespace detail

/// x + b where b's shape equals the trailing axes of x.
inline Var add_broadcast(Var x, Var b) {
  Tape& tape = detail::same_tape(x, b);
  const std::size_t n = detail::trailing_block("add_broadcast", x.shape(),
                                               b.shape());
  Tensor out(x.shape());
  const auto& xv = x.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + bv[i % n];
  return tape.record(std::move(out), {x, b},
                     [x, b, n](Tape& t, std::span<const double> g) {
                       if (t.needs_grad(x)) {
                         auto gx = t.grad(x);
                         for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                       }
                       if (t.needs_grad(b)) {
                         auto gb = t.grad(b);
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           gb[i % n] += g[i];
                         }
                       }
                     });
}

/// x * b where b's shape equals the trailing axes of x.
inline Var mul_broadcast(Var x, Var b) {
  Tape& tape = detail::same_tape(x, b);
  const std::size_t n = detail::trailing_block("mul_broadcast", x.shape(),
                                               b.shape());
  Tensor out(x.shape());
  const auto& xv = x.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * bv[i % n];
  return tape.record(std::move(out), {x, b},
                     [x, b, n](Tape& t, std::span<const double> g) {
                       const auto& xv = t.value(x);
                       const auto& bv = t.value(b);
                       if (t.needs_grad(x)) {
                         auto gx = t.grad(x);
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           gx[i] += g[i] * bv[i % n];
                         }
                       }
                       if (t.needs_grad(b)) {
                         auto gb = t.grad(b);
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           gb[i % n] += g[i] * xv[i];
                         }
                       }
                     });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(Var a, double c) { return scale(a, c); }
inline Var operator*(double c, Var a) { return scale(a, c); }

// ---------------------------------------------------------------------------
// Layout

inline Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape()->record(std::move(out), {x},
                          [x](Tape& t, std::span<const double> g) {
                            auto gx = t.grad(x);
                            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                          });
}

/// Repeats x `count` times along a new leading axis.
inline Var tile(Var x, std::size_t count) {
  Shape s;
  s.push_back(count);
  s.insert(s.end(), x.shape().begin(), x.shape().end());
  Tensor out(std::move(s));
  const auto& xv = x.value();
  const std::size_t n = xv.size();
  for (std::size_t c = 0; c < count; ++c) {
    std::copy(xv.data().begin(), xv.data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(c * n));
  }
  return x.tape()->record(std::move(out), {x},
                          [x, n](Tape& t, std::span<const double> g) {
                            auto gx = t.grad(x);
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              gx[i % n] += g[i];
                            }
                          });
}

/// Reorders axes: output axis i is input axis axes[i].
inline Var permute(Var x, std::vector<std::size_t> axes) {
  const Shape& s = x.shape();
  const std::size_t rank = s.size();
  std::vector<bool> seen(rank, false);
  bool ok = axes.size() == rank;
  for (std::size_t i = 0; ok && i < rank; ++i) {
    ok = axes[i] < rank && !seen[axes[i]];
    if (ok) seen[axes[i]] = true;
  }
  if (!ok) throw DimensionError("permute: invalid axes for " + to_string(s));

  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * s[i];
  Shape out_shape(rank);
  std::vector<std::size_t> strides(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = s[axes[i]];
    strides[i] = in_strides[axes[i]];
  }
  // source offset of every output element, in output order
  std::vector<std::size_t> src(numel(s));
  std::vector<std::size_t> idx(rank, 0);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < src.size(); ++flat) {
    src[flat] = offset;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      offset += strides[d];
      if (idx[d] < out_shape[d]) break;
      offset -= strides[d] * idx[d];
      idx[d] = 0;
    }
  }
  Tensor out(out_shape);
  const auto& xv = x.value();
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = xv[src[i]];
  return x.tape()->record(
      std::move(out), {x},
      [x, src = std::move(src)](Tape& t, std::span<const double> g) {
        auto gx = t.grad(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[src[i]] += g[i];
      });
}

inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no operands");
  Tape& tape = *parts.front().tape();
  const Shape& first = parts.front().shape();
  detail::checked_axis("concat", first, axis);
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Var& p : parts) {
    detail::same_tape(parts.front(), p);
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) {
      ok = i == axis || s[i] == first[i];
    }
    if (!ok) {
      throw DimensionError("concat: shape mismatch " + to_string(first) +
                           " vs " + to_string(s));
    }
    out_shape[axis] += s[axis];
  }
  const auto split = detail::split_at(out_shape, axis);
  const std::size_t out_block = split.n * split.inner;
  Tensor out(out_shape);
  std::vector<std::size_t> offsets;
  std::size_t at = 0;
  for (const Var& p : parts) {
    offsets.push_back(at);
    const std::size_t block = p.shape()[axis] * split.inner;
    const auto& pv = p.value();
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(pv.data().begin() + static_cast<std::ptrdiff_t>(o * block),
                  block,
                  out.data().begin() +
                      static_cast<std::ptrdiff_t>(o * out_block + at));
    }
    at += block;
  }
  return tape.record(
      std::move(out), std::span<const Var>(parts),
      [parts, offsets, split, out_block, axis](Tape& t,
                                               std::span<const double> g) {
        for (std::size_t i = 0; i < parts.size(); ++i) {
          if (!t.needs_grad(parts[i])) continue;
          auto gp = t.grad(parts[i]);
          const std::size_t block = t.value(parts[i]).shape()[axis] *
                                    split.inner;
          for (std::size_t o = 0; o < split.outer; ++o) {
            for (std::size_t j = 0; j < block; ++j) {
              gp[o * block + j] += g[o * out_block + offsets[i] + j];
            }
          }
        }
      });
}

/// Elements [begin, end) along axis.
inline Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  detail::checked_axis("slice", s, axis);
  if (begin > end || end > s[axis]) {
    throw DimensionError("slice: range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") out of bounds for " +
                         to_string(s));
  }
  const auto split = detail::split_at(s, axis);
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  Tensor out(out_shape);
  const std::size_t in_block = split.n * split.inner;
  const std::size_t block = (end - begin) * split.inner;
  const std::size_t skip = begin * split.inner;
  const auto& xv = x.value();
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(xv.data().begin() +
                    static_cast<std::ptrdiff_t>(o * in_block + skip),
                block,
                out.data().begin() + static_cast<std::ptrdiff_t>(o * block));
  }
  return x.tape()->record(
      std::move(out), {x},
      [x, split, in_block, block, skip](Tape& t, std::span<const double> g) {
        auto gx = t.grad(x);
        for (std::size_t o = 0; o < split.outer; ++o) {
          for (std::size_t j = 0; j < block; ++j) {
            gx[o * in_block + skip + j] += g[o * block + j];
          }
        }
      });
}

/// Rows of x (slices along axis 0) gathered in the given order.
inline Var index_select(Var x, std::vector<std::size_t> indices) {
  const Shape& s = x.shape();
  if (s.empty()) throw DimensionError("index_select on a scalar");
  const std::size_t row = x.value().row_size();
  Shape out_shape = s;
  out_shape[0] = indices.size();
  Tensor out(out_shape);
  const auto& xv = x.value();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= s[0]) {
      throw DimensionError("index_select: index " + std::to_string(indices[i]) +
                           " out of range for " + to_string(s));
    }
    std::copy_n(xv.data().begin() +
                    static_cast<std::ptrdiff_t>(indices[i] * row),
                row, out.data().begin() + static_cast<std::ptrdiff_t>(i * row));
  }
  return x.tape()->record(
      std::move(out), {x},
      [x, row, indices = std::move(indices)](Tape& t,
                                             std::span<const double> g) {
        auto gx = t.grad(x);
        for (std::size_t i = 0; i < indices.size(); ++i) {
          for (std::size_t j = 0; j < row; ++j) {
            gx[indices[i] * row + j] += g[i * row + j];
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization

/// Softmax along `axis`, max-subtracted. -inf entries receive probability 0;
/// a slice with no finite entry is a NumericError.
inline Var softmax(Var x, std::size_t axis) {
  const Shape& s = x.shape();
  detail::checked_axis("softmax", s, axis);
  const auto split = detail::split_at(s, axis);
  if (split.n == 0) throw DimensionError("softmax over an empty axis");
  Tensor out(s);
  const auto& xv = x.value();
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t in = 0; in < split.inner; ++in) {
      const std::size_t base = o * split.n * split.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < split.n; ++j) {
        mx = std::max(mx, xv[base + j * split.inner]);
      }
      if (!std::isfinite(mx)) {
        throw NumericError("softmax: slice has no finite entry");
      }
      double total = 0.0;
      for (std::size_t j = 0; j < split.n; ++j) {
        const double e = std::exp(xv[base + j * split.inner] - mx);
        out[base + j * split.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < split.n; ++j) {
        out[base + j * split.inner] /= total;
      }
    }
  }
  Tensor probs = out;
  return x.tape()->record(
      std::move(out), {x},
      [x, split, yv = std::move(probs)](Tape& t, std::span<const double> g) {
        auto gx = t.grad(x);
        for (std::size_t o = 0; o < split.outer; ++o) {
          for (std::size_t in = 0; in < split.inner; ++in) {
            const std::size_t base = o * split.n * split.inner + in;
            double dot = 0.0;
            for (std::size_t j = 0; j < split.n; ++j) {
              const std::size_t i = base + j * split.inner;
              dot += g[i] * yv[i];
            }
            for (std::size_t j = 0; j < split.n; ++j) {
              const std::size_t i = base + j * split.inner;
              gx[i] += yv[i] * (g[i] - dot);
            }
          }
        }
      });
}

/// Normalizes each slice along the last axis to zero mean and unit variance
/// (no affine transform).
inline Var layernorm(Var x, double eps = 1e-5) {
  const Shape& s = x.shape();
  if (s.empty()) throw DimensionError("layernorm on a scalar");
  const std::size_t n = s.back();
  const std::size_t rows = numel(s) / n;
  Tensor out(s);
  std::vector<double> inv_std(rows);
  const auto& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data().data() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += in[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = (in[j] - mean) * is;
  }
  Tensor normalized = out;
  return x.tape()->record(
      std::move(out), {x},
      [x, n, rows, inv_std = std::move(inv_std),
       xhat = std::move(normalized)](Tape& t, std::span<const double> g) {
        auto gx = t.grad(x);
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t r = 0; r < rows; ++r) {
          double gsum = 0.0;
          double gxs = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            gsum += g[r * n + j];
            gxs += g[r * n + j] * xhat[r * n + j];
          }
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t i = r * n + j;
            gx[i] += inv_std[r] * (g[i] - gsum * inv_n - xhat[i] * gxs * inv_n);
          }
        }
      });
}

/// Exact (erf) GELU.
inline Var gelu(Var x) {
  Tensor out(x.shape());
  const auto& xv = x.value();
  const bool keep_slope = x.tape()->needs_grad(x);
  std::vector<double> slope(keep_slope ? out.size() : 0);
  const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xv[i];
    const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
    out[i] = v * cdf;
    if (keep_slope) slope[i] = cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
  }
  return x.tape()->record(
      std::move(out), {x},
      [x, slope = std::move(slope)](Tape& t, std::span<const double> g) {
        auto gx = t.grad(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * slope[i];
      });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(Var x) {
  double total = 0.0;
  for (double v : x.value().data()) total += v;
  return x.tape()->record(Tensor::scalar(total), {x},
                          [x](Tape& t, std::span<const double> g) {
                            auto gx = t.grad(x);
                            for (double& v : gx) v += g[0];
                          });
}

inline Var mean(Var x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

/// sqrt of the sum of squares. The gradient at the origin is taken as 0.
inline Var frobenius_norm(Var x) {
  double ss = 0.0;
  for (double v : x.value().data()) ss += v * v;
  const double norm = std::sqrt(ss);
  return x.tape()->record(Tensor::scalar(norm), {x},
                          [x, norm](Tape& t, std::span<const double> g) {
                            if (norm == 0.0) return;
                            auto gx = t.grad(x);
                            const auto& xv = t.value(x);
                            for (std::size_t i = 0; i < gx.size(); ++i) {
                              gx[i] += g[0] * xv[i] / norm;
                            }
                          });
}

// ---------------------------------------------------------------------------
// Similarity

inline constexpr double kCosineEps = 1e-8;

namespace detail {

// d cos(u, v) / du with norms clamped from below by eps.
inline void cosine_grad(const double* u, const double* v, std::size_t d,
                        double nu_raw, double nv_raw, double eps, double c,
                        double scale_by, double* gu, double* gv) {
  const double nu = std::max(nu_raw, eps);
  const double nv = std::max(nv_raw, eps);
  const double inv = 1.0 / (nu * nv);
  for (std::size_t j = 0; j < d; ++j) {
    if (gu != nullptr) {
      double du = v[j] * inv;
      if (nu_raw > eps) du -= c * u[j] / (nu * nu);
      gu[j] += scale_by * du;
    }
    if (gv != nullptr) {
      double dv = u[j] * inv;
      if (nv_raw > eps) dv -= c * v[j] / (nv * nv);
      gv[j] += scale_by * dv;
    }
  }
}

inline double norm_of(const double* u, std::size_t d) {
  double ss = 0.0;
  for (std::size_t j = 0; j < d; ++j) ss += u[j] * u[j];
  return std::sqrt(ss);
}

}  // namespace detail

/// Plain-value cosine similarity u.v / (max(|u|,eps) max(|v|,eps)).
inline double cosine_similarity(std::span<const double> u,
                                std::span<const double> v,
                                double eps = kCosineEps) {
  if (u.size() != v.size() || u.empty()) {
    throw DimensionError("cosine_similarity: lengths " +
                         std::to_string(u.size()) + " and " +
                         std::to_string(v.size()));
  }
  double dot = 0.0;
  for (std::size_t j = 0; j < u.size(); ++j) dot += u[j] * v[j];
  const double nu = std::max(detail::norm_of(u.data(), u.size()), eps);
  const double nv = std::max(detail::norm_of(v.data(), v.size()), eps);
  return dot / (nu * nv);
}

/// Row-wise cosine similarity of two [n x D] matrices -> [n].
inline Var cosine_rows(Var u, Var v, double eps = kCosineEps) {
  Tape& tape = detail::same_tape(u, v);
  detail::require_same_shape("cosine_rows", u.shape(), v.shape());
  if (u.shape().size() != 2) {
    throw DimensionError("cosine_rows: expected matrices, got " +
                         to_string(u.shape()));
  }
  const std::size_t n = u.shape()[0];
  const std::size_t d = u.shape()[1];
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = cosine_similarity(u.value().row(i), v.value().row(i), eps);
  }
  Tensor cos = out;
  return tape.record(
      std::move(out), {u, v},
      [u, v, n, d, eps, cos = std::move(cos)](Tape& t,
                                              std::span<const double> g) {
        const double* uv = t.value(u).data().data();
        const double* vv = t.value(v).data().data();
        double* gu = t.needs_grad(u) ? t.grad(u).data() : nullptr;
        double* gv = t.needs_grad(v) ? t.grad(v).data() : nullptr;
        for (std::size_t i = 0; i < n; ++i) {
          const double* ui = uv + i * d;
          const double* vi = vv + i * d;
          detail::cosine_grad(ui, vi, d, detail::norm_of(ui, d),
                              detail::norm_of(vi, d), eps, cos[i], g[i],
                              gu ? gu + i * d : nullptr,
                              gv ? gv + i * d : nullptr);
        }
      });
}

/// Cosine similarity of two D-vectors as a scalar Var.
inline Var cosine_sim(Var u, Var v, double eps = kCosineEps) {
  if (u.shape().size() != 1) {
    throw DimensionError("cosine_sim: expected a vector, got " +
                         to_string(u.shape()));
  }
  const std::size_t d = u.shape()[0];
  return reshape(cosine_rows(reshape(u, {1, d}), reshape(v, {1, d}), eps),
                 Shape{});
}

/// out[b, m] = cos(q[b] * a[m], k[m]) for q [B x D], a and k [M x D].
inline Var attended_cosine(Var q, Var a, Var k, double eps = kCosineEps) {
  Tape& tape = detail::same_tape(q, a);
  detail::same_tape(q, k);
  const Shape& qs = q.shape();
  detail::require_same_shape("attended_cosine", a.shape(), k.shape());
  if (qs.size() != 2 || a.shape().size() != 2 || qs[1] != a.shape()[1]) {
    throw DimensionError("attended_cosine: query " + to_string(qs) +
                         " incompatible with " + to_string(a.shape()));
  }
  const std::size_t batch = qs[0];
  const std::size_t m = a.shape()[0];
  const std::size_t d = qs[1];
  Tensor out({batch, m});
  std::vector<double> attended(d);
  const double* qv = q.value().data().data();
  const double* av = a.value().data().data();
  const double* kv = k.value().data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < m; ++c) {
      for (std::size_t j = 0; j < d; ++j) {
        attended[j] = qv[b * d + j] * av[c * d + j];
      }
      out[b * m + c] = cosine_similarity(
          attended, std::span<const double>(kv + c * d, d), eps);
    }
  }
  Tensor cos = out;
  return tape.record(
      std::move(out), {q, a, k},
      [q, a, k, batch, m, d, eps, cos = std::move(cos)](
          Tape& t, std::span<const double> g) {
        const double* qv = t.value(q).data().data();
        const double* av = t.value(a).data().data();
        const double* kv = t.value(k).data().data();
        double* gq = t.needs_grad(q) ? t.grad(q).data() : nullptr;
        double* ga = t.needs_grad(a) ? t.grad(a).data() : nullptr;
        double* gk = t.needs_grad(k) ? t.grad(k).data() : nullptr;
        std::vector<double> u(d);
        std::vector<double> gu(d);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t c = 0; c < m; ++c) {
            for (std::size_t j = 0; j < d; ++j) {
              u[j] = qv[b * d + j] * av[c * d + j];
            }
            std::fill(gu.begin(), gu.end(), 0.0);
            detail::cosine_grad(u.data(), kv + c * d, d,
                                detail::norm_of(u.data(), d),
                                detail::norm_of(kv + c * d, d), eps,
                                cos[b * m + c], g[b * m + c], gu.data(),
                                gk ? gk + c * d : nullptr);
            for (std::size_t j = 0; j < d; ++j) {
              if (gq) gq[b * d + j] += gu[j] * av[c * d + j];
              if (ga) ga[c * d + j] += gu[j] * qv[b * d + j];
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Classification

/// Sets columns outside [begin, end) to -inf; no gradient reaches them.
inline Var mask_columns(Var logits, std::size_t begin, std::size_t end) {
  const Shape& s = logits.shape();
  if (s.size() != 2) {
    throw DimensionError("mask_columns: expected [B x C], got " + to_string(s));
  }
  const std::size_t c = s[1];
  if (begin >= end || end > c) {
    throw DimensionError("mask_columns: range [" + std::to_string(begin) +
                         "," + std::to_string(end) + ") invalid for " +
                         std::to_string(c) + " classes");
  }
  Tensor out = logits.value();
  const double ninf = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t col = i % c;
    if (col < begin || col >= end) out[i] = ninf;
  }
  return logits.tape()->record(
      std::move(out), {logits},
      [logits, begin, end, c](Tape& t, std::span<const double> g) {
        auto gl = t.grad(logits);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const std::size_t col = i % c;
          if (col >= begin && col < end) gl[i] += g[i];
        }
      });
}

/// Mean softmax cross-entropy of [B x C] logits against class indices.
inline Var cross_entropy(Var logits, const std::vector<std::size_t>& labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2 || s[0] != labels.size() || s[0] == 0) {
    throw DimensionError("cross_entropy: logits " + to_string(s) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t batch = s[0];
  const std::size_t c = s[1];
  const auto& lv = logits.value();
  Tensor probs({batch, c});
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] >= c) {
      throw DimensionError("cross_entropy: label " + std::to_string(labels[b]) +
                           " out of range for " + std::to_string(c) +
                           " classes");
    }
    const double* row = lv.data().data() + b * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, row[j]);
    if (!std::isfinite(mx)) {
      throw NumericError("cross_entropy: row has no finite logit");
    }
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double e = std::exp(row[j] - mx);
      probs[b * c + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < c; ++j) probs[b * c + j] /= z;
    const double nll = mx + std::log(z) - row[labels[b]];
    if (!std::isfinite(nll)) {
      throw NumericError("cross_entropy: target logit is masked or non-finite");
    }
    total += nll;
  }
  const double inv_b = 1.0 / static_cast<double>(batch);
  return logits.tape()->record(
      Tensor::scalar(total * inv_b), {logits},
      [logits, labels, probs = std::move(probs), batch, c, inv_b](
          Tape& t, std::span<const double> g) {
        auto gl = t.grad(logits);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t j = 0; j < c; ++j) {
            const double target = j == labels[b] ? 1.0 : 0.0;
            gl[b * c + j] += g[0] * inv_b * (probs[b * c + j] - target);
          }
        }
      });
}

}  // namespace coda
