// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The coda-prompt authors.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "coda/autograd.hpp"

namespace coda {

struct GradCheckOptions {
  double step = 1e-5;
  /// Denominator floor of the relative error, so entries whose true
  /// derivative is ~0 are compared in absolute terms.
  double floor = 1e-3;
  /// Check at most this many evenly spaced entries per parameter (0 = all).
  std::size_t max_entries_per_param = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

/// Differentiable scalar function. It must create its parameter leaves on
/// the tape it is given (tape.leaf(param)) so that perturbations are seen.
using ScalarFunction = std::function<Var(Tape&)>;

/// Compares tape gradients of f against central finite differences.
///
/// relative error = |analytic - numeric| / max(|analytic|, |numeric|, floor).
/// Every parameter is switched to requires_grad for the duration of the check
/// and restored afterwards.
inline GradCheckResult grad_check(const ScalarFunction& f,
                                  const std::vector<Tensor*>& params,
                                  const GradCheckOptions& options = {}) {
  std::vector<bool> previous;
  previous.reserve(params.size());
  for (Tensor* p : params) {
    previous.push_back(p->requires_grad());
    p->set_requires_grad(true);
    p->clear_grad();
  }

  auto evaluate = [&f]() {
    Tape tape;
    const double v = f(tape).value().item();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss");
    return v;
  };

  {
    Tape tape;
    Var loss = f(tape);
    if (!std::isfinite(loss.value().item())) {
      throw NumericError("grad_check: non-finite loss");
    }
    tape.backward(loss);
  }

  GradCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = *params[pi];
    const std::vector<double> analytic =
        p.grad() ? *p.grad() : std::vector<double>(p.size(), 0.0);
    if (!all_finite(analytic)) {
      throw NumericError("grad_check: non-finite analytic gradient");
    }
    std::size_t stride = 1;
    if (options.max_entries_per_param > 0 &&
        p.size() > options.max_entries_per_param) {
      stride = (p.size() + options.max_entries_per_param - 1) /
               options.max_entries_per_param;
    }
    for (std::size_t i = 0; i < p.size(); i += stride) {
      const double original = p[i];
      p[i] = original + options.step;
      const double plus = evaluate();
      p[i] = original - options.step;
      const double minus = evaluate();
      p[i] = original;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double denom =
          std::max({std::abs(analytic[i]), std::abs(numeric), options.floor});
      const double err = std::abs(analytic[i] - numeric) / denom;
      ++result.checked;
      if (result.checked == 1 || err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_param = pi;
        result.worst_index = i;
        result.analytic = analytic[i];
        result.numeric = numeric;
      }
    }
  }

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    params[pi]->clear_grad();
    params[pi]->set_requires_grad(previous[pi]);
  }
  return result;
}

}  // namespace coda
