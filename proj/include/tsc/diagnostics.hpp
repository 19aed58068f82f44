// SPDX-License-Identifier: Apache-2.0
//
// Network-level checks: finite-difference verification of every parameter
// gradient and the gradient-deviation curve under shrinking step sizes.
#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "tsc/gradcheck.hpp"
#include "tsc/network.hpp"

namespace tsc {

struct ParameterGradcheck {
  std::string name;
  GradcheckResult result;
};

/// Checks ∂(mean cross-entropy)/∂θ for every parameter tensor of `net`
/// against central differences. BN running statistics are restored after
/// the check so the network is left as it was.
inline std::vector<ParameterGradcheck> network_gradcheck(Network& net, const Tensor& batch,
                                                         std::span<const int> labels,
                                                         const GradcheckOptions& options = {},
                                                         Mode mode = Mode::train) {
  const auto saved_stats = net.bn_stats;
  std::vector<int> ys(labels.begin(), labels.end());
  std::vector<ParameterGradcheck> out;
  for (std::size_t p = 0; p < net.params.size(); ++p) {
    const ScalarFn f = [&net, &batch, &ys, p, mode](ad::Tape& tape, std::span<const ad::Var> in) {
      std::vector<ad::Var> pv;
      pv.reserve(net.params.size());
      for (std::size_t i = 0; i < net.params.size(); ++i) {
        pv.push_back(i == p ? in[0] : tape.constant(net.params[i].value));
      }
      ForwardOptions fo;
      fo.mode = mode;
      auto r = forward_with_params(net, tape, batch, std::move(pv), fo);
      return ad::softmax_cross_entropy(r.logits, ys);
    };
    out.push_back({net.params[p].name, gradcheck(f, {net.params[p].value}, options)});
  }
  net.bn_stats = saved_stats;
  return out;
}

struct DeviationPoint {
  double scale = 0.0;
  double max_deviation = 0.0;  ///< max over comparable blocks of ‖∂L/∂y_n − ∂L/∂y_D‖
};

/// For each scale s, multiplies every Δt by s and records the largest
/// within-stage gradient deviation. BN statistics are restored afterwards.
inline std::vector<DeviationPoint> gradient_deviation_curve(Network& net, const Tensor& batch, std::span<const int> labels,
                                                  std::span<const double> scales, Mode mode = Mode::train) {
  const auto saved_stats = net.bn_stats;
  std::vector<DeviationPoint> curve;
  for (double s : scales) {
    ForwardOptions fo;
    fo.mode = mode;
    fo.step_scale = s;
    if (s == 0.0) fo.step_override = 0.0;
    DeviationPoint pt{s, 0.0};
    for (const auto& e : layer_gradient_profile(net, batch, labels, fo)) {
      if (e.comparable) pt.max_deviation = std::max(pt.max_deviation, e.deviation);
    }
    curve.push_back(pt);
    net.bn_stats = saved_stats;
  }
  return curve;
}

}  // namespace tsc
