// SPDX-License-Identifier: Apache-2.0
//
// Time-stepping controllers: map a block's convolution weights (and, for the
// LSTM, the state carried from earlier blocks of the same stage) to a
// per-channel step-size vector in (0,1).
#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tsc/architecture.hpp"
#include "tsc/autodiff.hpp"

namespace tsc::ctrl {

enum class ControllerInit { fan_in, zero };

struct ControllerConfig {
  ControllerKind kind = ControllerKind::lstm;
  double fixed_step = 1.0;          ///< Δt for ControllerKind::fixed
  std::size_t reduction = 0;        ///< hidden width = C/r; 0 picks default_reduction()
  ControllerInit init = ControllerInit::fan_in;
  bool detach_projection = false;   ///< stop gradients from Δt flowing into conv weights

  friend bool operator==(const ControllerConfig&, const ControllerConfig&) = default;
};

/// Controller input for one block: input-channel means of the selected
/// convolutions, flattened and concatenated.
struct ProjectedWeights {
  ad::Var values;
  std::vector<std::size_t> sources;  ///< indices of the convs that were averaged
};

/// Averages each conv [C2,C1,k1,k2] over C1 and concatenates the k1·k2·C2 results.
inline ProjectedWeights project_weights(std::span<const ad::Var> convs, std::span<const std::size_t> select) {
  if (select.empty()) throw std::invalid_argument("project_weights: no convolutions selected");
  std::vector<ad::Var> parts;
  ProjectedWeights out;
  for (std::size_t i : select) {
    if (i >= convs.size()) throw std::invalid_argument("project_weights: conv index out of range");
    const ad::Var& w = convs[i];
    if (w.value().rank() != 4) throw std::invalid_argument("project_weights: expected [C2,C1,k1,k2] weights");
    ad::Var m = ad::mean_axis(w, 1);
    parts.push_back(ad::reshape(m, Shape{m.value().size()}));
    out.sources.push_back(i);
  }
  out.values = parts.size() == 1 ? parts.front() : ad::concat(parts);
  return out;
}

struct TwoFcParams {
  ad::Var w_in, b_in;    // [h, |w̄|], [h]
  ad::Var w_out, b_out;  // [C, h], [C]
};

struct LstmParams {
  ad::Var w_in, b_in;
  std::array<ad::Var, 4> w_gate;  // i, f, g, o: [h, 2h] acting on [h_prev, x]
  std::array<ad::Var, 4> b_gate;
  ad::Var w_out, b_out;

  std::size_t hidden() const { return b_in.value().size(); }
};

struct ControllerState {
  ad::Var h;
  ad::Var c;
};

inline ControllerState zero_state(ad::Tape& tape, std::size_t hidden) {
  return {tape.constant(Tensor(Shape{hidden})), tape.constant(Tensor(Shape{hidden}))};
}

/// Δt = σ(free parameters).
inline ad::Var indp_step(ad::Var free_params) { return ad::sigmoid(free_params); }

/// Δt = σ(W_out·ReLU(W_in·w̄ + b_in) + b_out).
inline ad::Var twofc_step(const TwoFcParams& p, ad::Var wbar) {
  if (wbar.value().size() != p.w_in.value().dim(1)) {
    throw std::invalid_argument("twofc_step: w̄ has length " + std::to_string(wbar.value().size()) +
                                ", input transform expects " + std::to_string(p.w_in.value().dim(1)));
  }
  ad::Var x = ad::relu(ad::linear(wbar, p.w_in, p.b_in));
  return ad::sigmoid(ad::linear(x, p.w_out, p.b_out));
}

/// One LSTM controller step:
///   x = ReLU(W_in·w̄ + b_in)
///   i,f,o = σ(W·[h_prev, x] + b), g = tanh(W_g·[h_prev, x] + b_g)
///   c = f⊙c_prev + i⊙g,  h = o⊙tanh(c),  Δt = σ(W_out·h + b_out)
inline std::pair<ad::Var, ControllerState> lstm_step(const LstmParams& p, const ControllerState& state,
                                                     ad::Var wbar) {
  const std::size_t hidden = p.hidden();
  if (wbar.value().size() != p.w_in.value().dim(1)) {
    throw std::invalid_argument("lstm_step: w̄ has length " + std::to_string(wbar.value().size()) +
                                ", input transform expects " + std::to_string(p.w_in.value().dim(1)));
  }
  if (state.h.value().size() != hidden || state.c.value().size() != hidden) {
    throw std::invalid_argument("lstm_step: state width must be " + std::to_string(hidden));
  }
  ad::Var x = ad::relu(ad::linear(wbar, p.w_in, p.b_in));
  ad::Var hx = ad::concat({state.h, x});
  ad::Var i = ad::sigmoid(ad::linear(hx, p.w_gate[0], p.b_gate[0]));
  ad::Var f = ad::sigmoid(ad::linear(hx, p.w_gate[1], p.b_gate[1]));
  ad::Var g = ad::tanh(ad::linear(hx, p.w_gate[2], p.b_gate[2]));
  ad::Var o = ad::sigmoid(ad::linear(hx, p.w_gate[3], p.b_gate[3]));
  ad::Var c = ad::add(ad::mul(f, state.c), ad::mul(i, g));
  ad::Var h = ad::mul(o, ad::tanh(c));
  ad::Var dt = ad::sigmoid(ad::linear(h, p.w_out, p.b_out));
  return {dt, ControllerState{h, c}};
}

/// Runs the shared LSTM controller through one stage in depth order, starting
/// from a zero state. Every block of a stage must share its output width.
inline std::vector<ad::Var> stage_run(const LstmParams& p, std::span<const ad::Var> wbars) {
  if (wbars.empty()) return {};
  const std::size_t len = wbars.front().value().size();
  for (const ad::Var& w : wbars) {
    if (w.value().size() != len) throw std::invalid_argument("stage_run: blocks of one stage must share C2");
  }
  ControllerState state = zero_state(p.b_in.tape(), p.hidden());
  std::vector<ad::Var> steps;
  steps.reserve(wbars.size());
  for (const ad::Var& w : wbars) {
    auto [dt, next] = lstm_step(p, state, w);
    steps.push_back(dt);
    state = next;
  }
  return steps;
}

}  // namespace tsc::ctrl
