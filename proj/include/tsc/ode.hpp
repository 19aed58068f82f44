// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tsc/tensor.hpp"

namespace tsc::ode {

using State = std::vector<double>;
using Rhs = std::function<State(double t, const State& y)>;

struct Ivp {
  Rhs rhs;
  State y0;
  double t_end = 1.0;
};

struct Step {
  double t = 0.0;  ///< time at the end of the step (accepted) or its start (rejected)
  State y;
  double dt = 0.0;
  double error = 0.0;
  bool accepted = true;
};

struct SolverTrace {
  std::vector<Step> steps;  ///< steps[0] is the initial condition with dt = 0
  std::size_t accepted = 0;
  std::size_t rejected = 0;

  const Step& final_step() const {
    for (auto it = steps.rbegin(); it != steps.rend(); ++it)
      if (it->accepted) return *it;
    throw std::logic_error("SolverTrace: no accepted step");
  }
};

/// Thrown when the state becomes non-finite or the adaptive controller cannot
/// satisfy the tolerance at the minimum step size.
class SolverError : public std::runtime_error {
 public:
  SolverError(const std::string& what, std::size_t step) : std::runtime_error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

struct AdaptiveConfig {
  double tol = 1e-4;
  double safety = 0.9;  // k
  double h_init = 0.1;
  double h_min = 1e-8;
  double h_max = 1.0;
  int order = 4;  // p
  double max_growth = 5.0;

  void validate() const {
    if (!(tol > 0)) throw std::invalid_argument("AdaptiveConfig: tol must be positive");
    if (!(safety > 0 && safety <= 1)) throw std::invalid_argument("AdaptiveConfig: safety must be in (0,1]");
    if (!(h_min > 0 && h_min <= h_init && h_init <= h_max)) {
      throw std::invalid_argument("AdaptiveConfig: need 0 < h_min <= h_init <= h_max");
    }
    if (order < 1) throw std::invalid_argument("AdaptiveConfig: order must be >= 1");
  }
};

enum class FixedMethod { euler, rk4 };

namespace detail {

inline void axpy(State& out, const State& y, double h, const State& k) {
  out.resize(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) out[i] = y[i] + h * k[i];
}

inline State eval(const Rhs& rhs, double t, const State& y, std::size_t step) {
  State k = rhs(t, y);
  if (k.size() != y.size()) throw std::invalid_argument("rhs returned a vector of the wrong dimension");
  for (double v : k)
    if (!std::isfinite(v)) throw SolverError("non-finite right-hand side at step " + std::to_string(step), step);
  return k;
}

inline void check_state(const State& y, std::size_t step) {
  for (double v : y)
    if (!std::isfinite(v)) throw SolverError("non-finite state at step " + std::to_string(step), step);
}

}  // namespace detail

/// y + h·f(t, y).
inline State euler_step(const Rhs& rhs, double t, const State& y, double h) {
  if (!(h > 0)) throw std::invalid_argument("euler_step: h must be positive");
  const State k = detail::eval(rhs, t, y, 0);
  State out;
  detail::axpy(out, y, h, k);
  return out;
}

inline State rk4_step(const Rhs& rhs, double t, const State& y, double h) {
  State tmp;
  const State k1 = detail::eval(rhs, t, y, 0);
  detail::axpy(tmp, y, h / 2, k1);
  const State k2 = detail::eval(rhs, t + h / 2, tmp, 0);
  detail::axpy(tmp, y, h / 2, k2);
  const State k3 = detail::eval(rhs, t + h / 2, tmp, 0);
  detail::axpy(tmp, y, h, k3);
  const State k4 = detail::eval(rhs, t + h, tmp, 0);
  State out(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) out[i] = y[i] + h / 6 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]);
  return out;
}

/// Fixed-step integration over [0, T]; the last step is shortened so the
/// trace ends exactly at T. N = ceil(T/h) up to a 1e-9 relative slack.
inline SolverTrace integrate_fixed(const Ivp& ivp, double h, FixedMethod method) {
  if (!(h > 0)) throw std::invalid_argument("integrate_fixed: h must be positive");
  if (!(ivp.t_end > 0)) throw std::invalid_argument("integrate_fixed: T must be positive");
  const double ratio = ivp.t_end / h;
  const auto n = static_cast<std::size_t>(std::max(1.0, std::ceil(ratio - 1e-9)));
  SolverTrace trace;
  trace.steps.push_back(Step{0.0, ivp.y0, 0.0, 0.0, true});
  State y = ivp.y0;
  double t = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const bool last = j + 1 == n;
    const double dt = last ? ivp.t_end - t : h;
    y = method == FixedMethod::euler ? euler_step(ivp.rhs, t, y, dt) : rk4_step(ivp.rhs, t, y, dt);
    detail::check_state(y, j + 1);
    t = last ? ivp.t_end : t + dt;
    trace.steps.push_back(Step{t, y, dt, 0.0, true});
    ++trace.accepted;
  }
  return trace;
}

/// Classical Fehlberg 4(5) tableau.
struct Fehlberg45 {
  static constexpr std::array<double, 6> c{0.0, 1.0 / 4, 3.0 / 8, 12.0 / 13, 1.0, 1.0 / 2};
  static constexpr std::array<std::array<double, 5>, 6> a{{
      {0, 0, 0, 0, 0},
      {1.0 / 4, 0, 0, 0, 0},
      {3.0 / 32, 9.0 / 32, 0, 0, 0},
      {1932.0 / 2197, -7200.0 / 2197, 7296.0 / 2197, 0, 0},
      {439.0 / 216, -8.0, 3680.0 / 513, -845.0 / 4104, 0},
      {-8.0 / 27, 2.0, -3544.0 / 2565, 1859.0 / 4104, -11.0 / 40},
  }};
  static constexpr std::array<double, 6> b4{25.0 / 216, 0, 1408.0 / 2565, 2197.0 / 4104, -1.0 / 5, 0};
  static constexpr std::array<double, 6> b5{16.0 / 135, 0, 6656.0 / 12825, 28561.0 / 56430, -9.0 / 50, 2.0 / 55};
};

struct RkfResult {
  State y;       ///< order-p solution (propagated)
  State y_high;  ///< order-(p+1) solution (error reference)
  double error = 0.0;
  double h_next = 0.0;
};

/// Next step from the embedded error: k·h·(Tol/err)^{1/(p+1)} clamped to
/// [h_min, h_max], growth limited to max_growth·h; err == 0 jumps to h_max.
inline double next_step_size(double h, double err, const AdaptiveConfig& cfg) {
  if (err == 0.0) return cfg.h_max;
  double h_next = cfg.safety * h * std::pow(cfg.tol / err, 1.0 / (cfg.order + 1));
  h_next = std::min(h_next, cfg.max_growth * h);
  return std::clamp(h_next, cfg.h_min, cfg.h_max);
}

namespace detail {

inline RkfResult rkf_step_unchecked(const Rhs& rhs, double t, const State& y, double h, const AdaptiveConfig& cfg) {
  using T = Fehlberg45;
  const std::size_t n = y.size();
  std::array<State, 6> k;
  State tmp(n);
  for (std::size_t s = 0; s < 6; ++s) {
    for (std::size_t i = 0; i < n; ++i) {
      double acc = y[i];
      for (std::size_t j = 0; j < s; ++j) acc += h * T::a[s][j] * k[j][i];
      tmp[i] = acc;
    }
    k[s] = eval(rhs, t + T::c[s] * h, tmp, 0);
  }
  RkfResult r;
  r.y.resize(n);
  r.y_high.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s4 = 0.0, s5 = 0.0;
    for (std::size_t s = 0; s < 6; ++s) {
      s4 += T::b4[s] * k[s][i];
      s5 += T::b5[s] * k[s][i];
    }
    r.y[i] = y[i] + h * s4;
    r.y_high[i] = y[i] + h * s5;
    r.error = std::max(r.error, std::abs(r.y[i] - r.y_high[i]));
  }
  r.h_next = next_step_size(h, r.error, cfg);
  return r;
}

}  // namespace detail

/// One Runge–Kutta–Fehlberg step; the error is the max-norm of the
/// order-4/order-5 disagreement.
inline RkfResult rkf_step(const Rhs& rhs, double t, const State& y, double h, const AdaptiveConfig& cfg) {
  cfg.validate();
  if (h < cfg.h_min || h > cfg.h_max) throw std::invalid_argument("rkf_step: h outside [h_min, h_max]");
  return detail::rkf_step_unchecked(rhs, t, y, h, cfg);
}

/// Adaptive integration over [0, T]. Steps with error above Tol are rejected
/// and retried with the proposed smaller step; the final step is clipped so
/// the trace ends exactly at T.
inline SolverTrace integrate_adaptive(const Ivp& ivp, const AdaptiveConfig& cfg) {
  cfg.validate();
  if (!(ivp.t_end > 0)) throw std::invalid_argument("integrate_adaptive: T must be positive");
  SolverTrace trace;
  trace.steps.push_back(Step{0.0, ivp.y0, 0.0, 0.0, true});
  State y = ivp.y0;
  double t = 0.0;
  double h = cfg.h_init;
  std::size_t index = 0;
  while (t < ivp.t_end) {
    const double remaining = ivp.t_end - t;
    const bool clipped = h >= remaining;
    const double dt = clipped ? remaining : h;
    ++index;
    RkfResult r = detail::rkf_step_unchecked(ivp.rhs, t, y, dt, cfg);
    if (r.error <= cfg.tol) {
      detail::check_state(r.y, index);
      y = std::move(r.y);
      t = clipped ? ivp.t_end : t + dt;
      trace.steps.push_back(Step{t, y, dt, r.error, true});
      ++trace.accepted;
      // A clipped step says nothing about how large the next one may be.
      if (!clipped) h = r.h_next;
    } else {
      trace.steps.push_back(Step{t, y, dt, r.error, false});
      ++trace.rejected;
      if (dt <= cfg.h_min) {
        throw SolverError("adaptive step reached h_min=" + std::to_string(cfg.h_min) + " with error " +
                              std::to_string(r.error) + " > tol at t=" + std::to_string(t),
                          index);
      }
      h = std::min(r.h_next, dt);
      if (h >= dt) h = std::max(cfg.h_min, 0.5 * dt);
    }
  }
  return trace;
}

}  // namespace tsc::ode
