// SPDX-License-Identifier: Apache-2.0
//
// SGD with Nesterov momentum and a piecewise-constant learning-rate schedule.
#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "tsc/tensor.hpp"

namespace tsc::optim {

/// Nesterov update of one tensor in place:
///   g' = g + wd·p
///   v  = μ·v + g'
///   p -= lr·(g' + μ·v)
inline void nesterov_update(Tensor& p, const Tensor& g, Tensor& v, double lr, double momentum, double weight_decay) {
  if (g.shape() != p.shape() || v.shape() != p.shape()) {
    throw std::invalid_argument("nesterov_update: shape mismatch " + shape_str(p.shape()) + " vs " +
                                shape_str(g.shape()) + " / " + shape_str(v.shape()));
  }
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double gk = g[k] + weight_decay * p[k];
    v[k] = momentum * v[k] + gk;
    p[k] -= lr * (gk + momentum * v[k]);
  }
}

/// Applies nesterov_update to every tensor; weight decay is used only where
/// decay_mask is set. `velocity` is zero-initialized on first use.
inline void sgd_nesterov_step(std::span<Tensor> params, std::span<const Tensor> grads, std::vector<Tensor>& velocity,
                              double lr, double momentum, double weight_decay, std::span<const bool> decay_mask) {
  if (grads.size() != params.size() || decay_mask.size() != params.size()) {
    throw std::invalid_argument("sgd_nesterov_step: params, grads and mask must have equal length");
  }
  if (velocity.empty()) {
    for (const Tensor& p : params) velocity.emplace_back(p.shape());
  }
  if (velocity.size() != params.size()) throw std::invalid_argument("sgd_nesterov_step: velocity length mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    nesterov_update(params[i], grads[i], velocity[i], lr, momentum, decay_mask[i] ? weight_decay : 0.0);
  }
}

struct LrSchedule {
  double initial = 0.1;
  std::vector<std::size_t> milestones;  ///< epochs at which the rate is multiplied by `factor`
  double factor = 0.1;

  void validate() const {
    if (!(initial >= 0.0)) throw std::invalid_argument("LrSchedule: initial rate must be >= 0");
    if (!(factor > 0.0)) throw std::invalid_argument("LrSchedule: factor must be positive");
    for (std::size_t i = 1; i < milestones.size(); ++i) {
      if (milestones[i] <= milestones[i - 1]) throw std::invalid_argument("LrSchedule: milestones must increase");
    }
  }

  /// Rate used throughout `epoch` (0-based).
  double at(std::size_t epoch) const {
    double lr = initial;
    for (std::size_t m : milestones)
      if (epoch >= m) lr *= factor;
    return lr;
  }

  /// Drops at 50% and 75% of training.
  static LrSchedule halves_and_quarters(double initial, std::size_t epochs, double factor = 0.1) {
    LrSchedule s{initial, {}, factor};
    const std::size_t a = epochs / 2, b = (3 * epochs) / 4;
    if (a > 0) s.milestones.push_back(a);
    if (b > a) s.milestones.push_back(b);
    return s;
  }

  friend bool operator==(const LrSchedule&, const LrSchedule&) = default;
};

}  // namespace tsc::optim
