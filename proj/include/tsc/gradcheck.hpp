// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference verification of reverse-mode gradients.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tsc/autodiff.hpp"

namespace tsc {

/// Builds a scalar loss on `tape` from leaves created for each input tensor.
using ScalarFn = std::function<ad::Var(ad::Tape& tape, std::span<const ad::Var> inputs)>;

struct GradcheckOptions {
  double step = 1e-5;
  double rtol = 1e-4;
  /// Entries whose absolute error is below this pass regardless of relative
  /// error; covers gradients that are zero up to round-off.
  double atol = 1e-8;
  std::size_t max_entries = 0;  ///< per input; 0 checks every entry
};

struct GradcheckResult {
  bool passed = true;
  std::size_t checked = 0;
  double max_abs_error = 0.0;
  double max_rel_error = 0.0;
  std::string worst;  ///< location of the worst failing entry, empty when passed
};

inline double evaluate_scalar(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.constant(t));
  return f(tape, vars).value().item();
}

inline GradcheckResult gradcheck(const ScalarFn& f, std::vector<Tensor> inputs, const GradcheckOptions& opt = {}) {
  std::vector<Tensor> analytic;
  {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t));
    ad::Var loss = f(tape, vars);
    tape.backward(loss);
    for (const auto& v : vars) analytic.push_back(tape.grad(v));
  }
  GradcheckResult r;
  double worst_score = 0.0;
  for (std::size_t a = 0; a < inputs.size(); ++a) {
    const std::size_t n = inputs[a].size();
    const std::size_t stride = (opt.max_entries == 0 || n <= opt.max_entries) ? 1 : n / opt.max_entries;
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = inputs[a][i];
      inputs[a][i] = orig + opt.step;
      const double fp = evaluate_scalar(f, inputs);
      inputs[a][i] = orig - opt.step;
      const double fm = evaluate_scalar(f, inputs);
      inputs[a][i] = orig;
      const double numeric = (fp - fm) / (2 * opt.step);
      const double exact = analytic[a][i];
      const double abs_err = std::abs(numeric - exact);
      const double rel_err = abs_err / std::max({std::abs(numeric), std::abs(exact), 1e-300});
      ++r.checked;
      r.max_abs_error = std::max(r.max_abs_error, abs_err);
      if (abs_err > opt.atol) r.max_rel_error = std::max(r.max_rel_error, rel_err);
      if (abs_err > opt.atol && rel_err > opt.rtol) {
        r.passed = false;
        if (rel_err > worst_score) {
          worst_score = rel_err;
          r.worst = "input " + std::to_string(a) + " entry " + std::to_string(i) + ": analytic " +
                    std::to_string(exact) + " vs numeric " + std::to_string(numeric);
        }
      }
    }
  }
  return r;
}

}  // namespace tsc
