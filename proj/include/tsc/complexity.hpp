// SPDX-License-Identifier: Apache-2.0
//
// Parameter and multiply-accumulate counts for staged residual networks and
// for the step-size controllers attached to them.
#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsc/architecture.hpp"

namespace tsc::cx {

/// Closed-form controller overhead in the published symbolic form:
///   indp  Σ L_b C_b
///   2fc   Σ L_b C_b²/r (1 + k1k2)
///   lstm  Σ C_b²/r (1 + 8/r + k1k2)
/// Biases are not counted. With `concat_corrected`, the k1k2 input factor
/// becomes 2·k1k2 to account for the two concatenated basic-block kernels.
inline std::size_t overhead_estimate(ControllerKind kind, std::span<const std::size_t> L,
                                   std::span<const std::size_t> C, std::size_t r, std::size_t k1, std::size_t k2,
                                   bool concat_corrected = false) {
  if (L.size() != C.size() || L.empty()) throw std::invalid_argument("overhead_estimate: need one L_b and C_b per stage");
  if (r == 0 || k1 == 0 || k2 == 0) throw std::invalid_argument("overhead_estimate: r, k1, k2 must be positive");
  const std::size_t kk = (concat_corrected ? 2 : 1) * k1 * k2;
  std::size_t total = 0;
  for (std::size_t b = 0; b < L.size(); ++b) {
    const std::size_t c = C[b];
    if (L[b] == 0 || c == 0) throw std::invalid_argument("overhead_estimate: L_b and C_b must be positive");
    if (c % r != 0) {
      throw std::invalid_argument("overhead_estimate: C_b=" + std::to_string(c) + " is not divisible by r=" +
                                  std::to_string(r));
    }
    const std::size_t h = c / r;  // C²/r = C·h, 8C²/r² = 8h²
    switch (kind) {
      case ControllerKind::fixed: break;
      case ControllerKind::indp: total += L[b] * c; break;
      case ControllerKind::twofc: total += L[b] * c * h * (1 + kk); break;
      case ControllerKind::lstm: total += c * h * (1 + kk) + 8 * h * h; break;
    }
  }
  return total;
}

/// Table-1 estimate for a spec, reading L_b and C_b from its stages.
inline std::size_t overhead_estimate(ControllerKind kind, const NetworkSpec& spec, std::size_t r, std::size_t k = 3,
                                   bool concat_corrected = false) {
  std::vector<std::size_t> L, C;
  for (const auto& s : spec.stages) {
    L.push_back(s.num_blocks);
    C.push_back(s.channels);
  }
  return overhead_estimate(kind, L, C, r, k, k, concat_corrected);
}

/// Σ_b L_b C_b: the step sizes stored after baking.
inline std::size_t baked_step_count(const NetworkSpec& spec) {
  std::size_t n = 0;
  for (const auto& s : spec.stages) n += s.num_blocks * s.channels;
  return n;
}

enum class Phase { train, inference };

/// Exact controller parameter count including biases, built from the actual
/// transform shapes. Training: input fc (|w̄|·h + h), LSTM gates 4·(2h·h + h),
/// output fc (h·C + C), once per stage (lstm) or per block (2fc); indp
/// stores Σ L_b C_b free values. Inference: the baked Σ L_b C_b steps for
/// every controller kind; the fixed baseline stores nothing.
inline std::size_t exact_overhead(ControllerKind kind, const NetworkSpec& spec, std::size_t r,
                                  Phase phase = Phase::train) {
  if (kind == ControllerKind::fixed) return 0;
  if (phase == Phase::inference || kind == ControllerKind::indp) return baked_step_count(spec);
  if (r == 0) throw std::invalid_argument("exact_overhead: r must be positive");
  const auto blocks = block_geometry(spec);
  std::size_t total = 0;
  for (std::size_t s = 0; s < spec.stages.size(); ++s) {
    const std::size_t C = spec.stages[s].channels;
    if (C % r != 0) {
      throw std::invalid_argument("exact_overhead: stage width " + std::to_string(C) + " not divisible by r=" +
                                  std::to_string(r));
    }
    const std::size_t h = C / r;
    for (const auto& g : blocks) {
      if (g.stage != s) continue;
      const std::size_t in_fc = g.projected_length() * h + h;
      const std::size_t out_fc = h * C + C;
      if (kind == ControllerKind::twofc) {
        total += in_fc + out_fc;
      } else if (g.index == 0) {
        total += in_fc + 4 * (2 * h * h + h) + out_fc;
      }
    }
  }
  return total;
}

/// Parameters of the network itself: bias-free convolutions, BN affine pairs,
/// projection shortcuts and the classifier with bias.
inline std::size_t resnet_params(const NetworkSpec& spec) {
  const StemGeometry stem = stem_geometry(spec);
  std::size_t n = stem.conv.params() + (stem.batch_norm ? 2 * stem.conv.out_ch : 0);
  for (const auto& g : block_geometry(spec)) {
    for (const auto& c : g.convs) n += c.params() + (g.batch_norm ? 2 * c.out_ch : 0);
    if (g.projection) n += g.projection->params() + (g.batch_norm ? 2 * g.projection->out_ch : 0);
  }
  const std::size_t last = spec.stages.back().channels;
  return n + last * spec.num_classes + spec.num_classes;
}

/// Multiply-accumulates of all convolutions and the classifier at the spec's
/// input size (1 MAC counted as 1 FLOP).
inline std::size_t resnet_flops(const NetworkSpec& spec) {
  const StemGeometry stem = stem_geometry(spec);
  std::size_t H = stem.conv.out_size(spec.input_height), W = stem.conv.out_size(spec.input_width);
  std::size_t macs = H * W * stem.conv.params();
  if (stem.max_pool) {
    H = (H + 2 - 3) / 2 + 1;
    W = (W + 2 - 3) / 2 + 1;
  }
  for (const auto& g : block_geometry(spec)) {
    std::size_t h = H, w = W;
    for (const auto& c : g.convs) {
      h = c.out_size(h);
      w = c.out_size(w);
      macs += h * w * c.params();
    }
    if (g.projection) macs += h * w * g.projection->params();
    H = h;
    W = w;
  }
  return macs + spec.stages.back().channels * spec.num_classes;
}

struct StageComplexity {
  std::size_t stage = 0;
  std::size_t blocks = 0;
  std::size_t channels = 0;
  std::size_t overhead_train = 0;
  std::size_t overhead_inference = 0;
};

struct ComplexityReport {
  ControllerKind kind = ControllerKind::lstm;
  std::size_t reduction = 0;
  std::size_t base_params = 0;
  std::size_t params_train = 0;
  std::size_t params_infer = 0;
  std::size_t flops_infer = 0;
  std::size_t controller_overhead_train = 0;
  std::size_t controller_overhead_infer = 0;
  std::vector<StageComplexity> stages;
};

inline ComplexityReport complexity_report(const NetworkSpec& spec, ControllerKind kind, std::size_t r = 0) {
  ComplexityReport rep;
  rep.kind = kind;
  rep.reduction = r ? r : default_reduction(spec);
  rep.base_params = resnet_params(spec);
  rep.flops_infer = resnet_flops(spec);
  rep.controller_overhead_train = exact_overhead(kind, spec, rep.reduction, Phase::train);
  rep.controller_overhead_infer = exact_overhead(kind, spec, rep.reduction, Phase::inference);
  rep.params_train = rep.base_params + rep.controller_overhead_train;
  rep.params_infer = rep.base_params + rep.controller_overhead_infer;
  const auto blocks = block_geometry(spec);
  for (std::size_t s = 0; s < spec.stages.size(); ++s) {
    StageComplexity sc{s, spec.stages[s].num_blocks, spec.stages[s].channels, 0, 0};
    const std::size_t C = spec.stages[s].channels, h = C / rep.reduction;
    for (const auto& g : blocks) {
      if (g.stage != s) continue;
      if (kind == ControllerKind::indp) {
        sc.overhead_train += C;
      } else if (kind == ControllerKind::twofc) {
        sc.overhead_train += g.projected_length() * h + h + h * C + C;
      } else if (kind == ControllerKind::lstm && g.index == 0) {
        sc.overhead_train += g.projected_length() * h + h + 4 * (2 * h * h + h) + h * C + C;
      }
      if (kind != ControllerKind::fixed) sc.overhead_inference += C;
    }
    rep.stages.push_back(sc);
  }
  return rep;
}

struct FcShape {
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t repeat = 1;
  std::string text;  ///< bracket notation, e.g. "[320,32]×1"
};

struct FcShapeRow {
  std::size_t stage = 0;
  FcShape input;
  FcShape lstm;
  FcShape output;
};

/// LSTM controller transform shapes per stage in bracket notation: input
/// [|w̄|,h]×1, gates [2h,h]×4, output [h,C]×1. Basic-block inputs are written
/// as k×k×2C to show the two concatenated kernels.
inline std::vector<FcShapeRow> fc_shape_table(const NetworkSpec& spec, std::size_t r = 0) {
  if (r == 0) r = default_reduction(spec);
  const auto blocks = block_geometry(spec);
  auto bracket = [](const std::string& a, std::size_t b, std::size_t rep) {
    return "[" + a + "," + std::to_string(b) + "]×" + std::to_string(rep);
  };
  std::vector<FcShapeRow> rows;
  for (std::size_t s = 0; s < spec.stages.size(); ++s) {
    const std::size_t C = spec.stages[s].channels;
    if (C % r != 0) throw std::invalid_argument("fc_shape_table: stage width not divisible by r");
    const std::size_t h = C / r;
    const BlockGeometry* first = nullptr;
    for (const auto& g : blocks)
      if (g.stage == s && g.index == 0) first = &g;
    FcShapeRow row;
    row.stage = s;
    const std::size_t in = first->projected_length();
    std::string in_text = std::to_string(in);
    if (first->kind != BlockKind::bottleneck) {
      std::size_t k = first->convs.front().kernel;
      std::size_t width = 0;
      for (std::size_t i : first->projected) width += first->convs[i].out_ch;
      if (k > 1) in_text = std::to_string(k) + "×" + std::to_string(k) + "×" + std::to_string(width);
    }
    row.input = FcShape{in, h, 1, bracket(in_text, h, 1)};
    row.lstm = FcShape{2 * h, h, 4, bracket(std::to_string(2 * h), h, 4)};
    row.output = FcShape{h, C, 1, bracket(std::to_string(h), C, 1)};
    rows.push_back(row);
  }
  return rows;
}

}  // namespace tsc::cx
