// SPDX-License-Identifier: Apache-2.0
//
// Stability quantities for residual networks read as forward-Euler schemes:
// the scalar Euler factor |1 + hλ|, spectral norms by power iteration, the
// perturbation bound ε·∏(1 + ‖W_j‖₂Δt_j) and its empirical check.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsc/network.hpp"
#include "tsc/rng.hpp"
#include "tsc/tensor.hpp"

namespace tsc::stab {

/// |1 + hλ|; forward Euler damps a perturbation along λ when this is ≤ 1.
inline double linear_stability_factor(double lambda, double h) { return std::abs(1.0 + h * lambda); }

inline double frobenius_norm(const Tensor& w) { return l2_norm(w.data()); }

struct SpectralEstimate {
  double value = 0.0;
  std::size_t iterations = 0;
  double residual = 0.0;  ///< ‖WᵀWv − σ²v‖ / σ² at the final iterate
  bool converged = true;
};

struct PowerIterationOptions {
  std::size_t max_iters = 20000;
  double tol = 1e-14;  ///< relative change of σ between iterations
};

/// Largest singular value of a rows×cols matrix (row-major) by power
/// iteration on WᵀW from a fixed, non-symmetric starting vector.
inline SpectralEstimate spectral_norm(std::span<const double> w, std::size_t rows, std::size_t cols,
                                      const PowerIterationOptions& opt = {}) {
  if (rows == 0 || cols == 0 || w.size() != rows * cols) {
    throw std::invalid_argument("spectral_norm: matrix must be non-empty with rows*cols entries");
  }
  SpectralEstimate est;
  if (max_abs(w) == 0.0) return est;
  std::vector<double> v(cols), u(rows), z(cols);
  for (std::size_t j = 0; j < cols; ++j) v[j] = 1.0 + 0.5 * std::sin(1.0 + 2.3 * static_cast<double>(j));
  auto normalize = [](std::vector<double>& x) {
    const double n = l2_norm(x);
    for (double& e : x) e /= n;
    return n;
  };
  normalize(v);
  auto apply = [&](const std::vector<double>& in) {
    for (std::size_t i = 0; i < rows; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < cols; ++j) s += w[i * cols + j] * in[j];
      u[i] = s;
    }
    std::fill(z.begin(), z.end(), 0.0);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) z[j] += w[i * cols + j] * u[i];
  };
  double sigma = 0.0;
  est.converged = false;
  for (std::size_t k = 1; k <= opt.max_iters; ++k) {
    apply(v);
    const double next = l2_norm(u);  // ‖Wv‖ with ‖v‖ = 1
    est.iterations = k;
    if (next == 0.0) {
      // Start vector in the null space: restart from a unit basis vector.
      std::fill(v.begin(), v.end(), 0.0);
      v[k % cols] = 1.0;
      continue;
    }
    v = z;
    normalize(v);
    if (std::abs(next - sigma) <= opt.tol * next) {
      sigma = next;
      est.converged = true;
      break;
    }
    sigma = next;
  }
  apply(v);
  sigma = std::max(sigma, l2_norm(u));
  est.value = sigma;
  double r2 = 0.0;
  for (std::size_t j = 0; j < cols; ++j) {
    const double d = z[j] - sigma * sigma * v[j];
    r2 += d * d;
  }
  est.residual = std::sqrt(r2) / (sigma * sigma);
  return est;
}

inline SpectralEstimate spectral_norm(const Tensor& w, const PowerIterationOptions& opt = {}) {
  if (w.rank() != 2) throw std::invalid_argument("spectral_norm: expected a matrix, got " + shape_str(w.shape()));
  return spectral_norm(w.data(), w.dim(0), w.dim(1), opt);
}

/// Dense matrix of the zero-padded convolution y ↦ w * y on C1×H×W inputs:
/// rows index (c2, i, j) outputs, columns index (c1, r, q) inputs.
inline Tensor conv_operator_matrix(const Tensor& w, std::size_t H, std::size_t W, std::size_t stride,
                                   std::size_t pad) {
  const auto g = ad::conv2d_geometry(Shape{w.dim(1), H, W}, w.shape(), stride, pad);
  const std::size_t rows = g.out_ch * g.out_h * g.out_w, cols = g.in_ch * H * W;
  Tensor m(Shape{rows, cols});
  for (std::size_t o = 0; o < g.out_ch; ++o)
    for (std::size_t i = 0; i < g.out_h; ++i)
      for (std::size_t j = 0; j < g.out_w; ++j) {
        const std::size_t row = (o * g.out_h + i) * g.out_w + j;
        for (std::size_t c = 0; c < g.in_ch; ++c)
          for (std::size_t a = 0; a < g.kh; ++a)
            for (std::size_t b = 0; b < g.kw; ++b) {
              const long r = static_cast<long>(i * stride + a) - static_cast<long>(pad);
              const long q = static_cast<long>(j * stride + b) - static_cast<long>(pad);
              if (r < 0 || q < 0 || r >= static_cast<long>(H) || q >= static_cast<long>(W)) continue;
              m[row * cols + (c * H + static_cast<std::size_t>(r)) * W + static_cast<std::size_t>(q)] +=
                  w[((o * g.in_ch + c) * g.kh + a) * g.kw + b];
            }
      }
  return m;
}

/// ε·∏_j (1 + σ_j Δt_j).
inline double amplification_bound(std::span<const double> sigmas, std::span<const double> steps, double epsilon) {
  if (sigmas.size() != steps.size()) throw std::invalid_argument("amplification_bound: sigma and step lists differ in length");
  if (epsilon < 0) throw std::invalid_argument("amplification_bound: epsilon must be non-negative");
  double b = epsilon;
  for (std::size_t j = 0; j < sigmas.size(); ++j) {
    if (sigmas[j] < 0 || steps[j] < 0) throw std::invalid_argument("amplification_bound: negative norm or step size");
    b *= 1.0 + sigmas[j] * steps[j];
  }
  return b;
}

/// Channel-wise steps are scalarized by their per-block maximum.
inline double amplification_bound(std::span<const double> sigmas, std::span<const Tensor> steps, double epsilon) {
  std::vector<double> maxima;
  for (const Tensor& t : steps) maxima.push_back(*std::max_element(t.data().begin(), t.data().end()));
  return amplification_bound(sigmas, maxima, epsilon);
}

struct PerturbationReport {
  double epsilon = 0.0;
  std::size_t trials = 0;
  double amplification_max = 0.0;
  double amplification_mean = 0.0;
  double bound = 0.0;
  double slack = 0.0;             ///< bound − amplification_max
  std::vector<double> sigmas;     ///< ‖W_j‖₂ per block
  std::vector<double> steps;      ///< max_c Δt_j per block
};

/// Rejects networks outside the bound's regime: only plain blocks
/// y + Δt ⊗ ReLU(W y) with identity shortcuts qualify.
inline void require_plain_trunk(const Network& net) {
  if (net.spec.uses_batch_norm()) {
    throw std::invalid_argument(
        "measure_amplification: the perturbation bound is only established for plain ReLU blocks; "
        "this network uses batch normalization");
  }
  for (const auto& b : net.blocks) {
    if (b.geom.kind != BlockKind::plain || b.proj) {
      throw std::invalid_argument("measure_amplification: block " + std::to_string(b.geom.index) + " of stage " +
                                  std::to_string(b.geom.stage) +
                                  " changes shape; the bound needs identity shortcuts throughout");
    }
  }
}

/// Runs the residual trunk (all blocks, no stem or head) on one sample [C,H,W].
inline Tensor trunk_forward(Network& net, std::span<const Tensor> steps, const Tensor& y0) {
  ad::Tape tape;
  const auto pv = register_params(net, tape, false);
  ad::Var y = tape.constant(y0);
  for (std::size_t b = 0; b < net.blocks.size(); ++b) {
    y = block_forward(net, pv, b, y, tape.constant(steps[b]), Mode::eval);
  }
  return y.value();
}

/// Spectral norm of every block's convolution as an operator on H×W maps.
inline std::vector<double> block_spectral_norms(const Network& net, std::size_t H, std::size_t W) {
  std::vector<double> s;
  for (const auto& b : net.blocks) {
    const Tensor& w = net.params[b.convs[0]].value;
    const Tensor m = conv_operator_matrix(w, H, W, b.geom.convs[0].stride, b.geom.convs[0].pad);
    s.push_back(spectral_norm(m).value);
  }
  return s;
}

/// Draws `trials` perturbations uniformly on the ε-sphere around the trunk
/// input y0 [C,H,W], propagates both copies and compares the outputs with the
/// bound. Trial t uses an RNG seeded by fork_seed(seed, t).
inline PerturbationReport measure_amplification(Network& net, const Tensor& y0, double epsilon, std::size_t trials,
                                                std::uint64_t seed) {
  require_plain_trunk(net);
  if (trials == 0) throw std::invalid_argument("measure_amplification: trials must be >= 1");
  if (y0.rank() != 3) throw std::invalid_argument("measure_amplification: y0 must be [C,H,W]");
  std::vector<Tensor> steps;
  for (auto& row : export_step_sizes(net)) steps.push_back(std::move(row.dt));
  PerturbationReport rep;
  rep.epsilon = epsilon;
  rep.trials = trials;
  rep.sigmas = block_spectral_norms(net, y0.dim(1), y0.dim(2));
  for (const Tensor& t : steps) rep.steps.push_back(*std::max_element(t.data().begin(), t.data().end()));
  rep.bound = amplification_bound(rep.sigmas, rep.steps, epsilon);
  const Tensor base = trunk_forward(net, steps, y0);
  double sum = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng(fork_seed(seed, t));
    const auto delta = sphere_sample(rng, y0.size(), epsilon);
    Tensor yp = y0;
    for (std::size_t i = 0; i < yp.size(); ++i) yp[i] += delta[i];
    const Tensor out = trunk_forward(net, steps, yp);
    double d2 = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) d2 += (out[i] - base[i]) * (out[i] - base[i]);
    const double amp = std::sqrt(d2);
    rep.amplification_max = std::max(rep.amplification_max, amp);
    sum += amp;
  }
  rep.amplification_mean = sum / static_cast<double>(trials);
  rep.slack = rep.bound - rep.amplification_max;
  return rep;
}

using VectorField = std::function<std::vector<double>(const std::vector<double>&)>;

struct EulerStabilityOptions {
  double fd_step = 1e-6;
  std::size_t iterations = 200;
  std::size_t window = 10;
  std::size_t probes = 8;
  std::uint64_t seed = 0;
};

/// Central-difference Jacobian of f at y.
inline Tensor jacobian_fd(const VectorField& f, const std::vector<double>& y, double step) {
  const std::size_t n = y.size();
  Tensor J(Shape{n, n});
  std::vector<double> p = y, m = y;
  for (std::size_t j = 0; j < n; ++j) {
    p[j] = y[j] + step;
    m[j] = y[j] - step;
    const auto fp = f(p), fm = f(m);
    if (fp.size() != n || fm.size() != n) throw std::invalid_argument("jacobian_fd: rhs changed dimension");
    for (std::size_t i = 0; i < n; ++i) {
      const double d = (fp[i] - fm[i]) / (2 * step);
      if (!std::isfinite(d)) throw NumericError("jacobian_fd: non-finite derivative in column " + std::to_string(j));
      J[i * n + j] = d;
    }
    p[j] = m[j] = y[j];
  }
  return J;
}

/// Estimates max_i |1 + hλ_i(J)| for the Jacobian J of f at y: the spectral
/// radius of I + hJ from windowed geometric means of ‖A^k v‖/‖A^{k−1} v‖,
/// maximized over random unit starts.
inline double euler_stability_check(const VectorField& f, const std::vector<double>& y, double h,
                                    const EulerStabilityOptions& opt = {}) {
  const std::size_t n = y.size();
  if (n == 0 || n > 256) throw std::invalid_argument("euler_stability_check: state dimension must be in [1, 256]");
  if (opt.window == 0 || opt.window > opt.iterations) {
    throw std::invalid_argument("euler_stability_check: window must be in [1, iterations]");
  }
  Tensor A = jacobian_fd(f, y, opt.fd_step);
  for (double& v : A.storage()) v *= h;
  for (std::size_t i = 0; i < n; ++i) A[i * n + i] += 1.0;
  double best = 0.0;
  for (std::size_t p = 0; p < std::max<std::size_t>(opt.probes, 1); ++p) {
    Rng rng(fork_seed(opt.seed, p));
    std::vector<double> v = sphere_sample(rng, n, 1.0), w(n);
    std::vector<double> logs;
    for (std::size_t k = 0; k < opt.iterations; ++k) {
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += A[i * n + j] * v[j];
        w[i] = s;
      }
      const double r = l2_norm(w);
      if (r == 0.0) {
        logs.assign(opt.window, -std::numeric_limits<double>::infinity());
        break;
      }
      logs.push_back(std::log(r));
      for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / r;
    }
    double acc = 0.0;
    for (std::size_t k = logs.size() - opt.window; k < logs.size(); ++k) acc += logs[k];
    best = std::max(best, std::exp(acc / static_cast<double>(opt.window)));
  }
  return best;
}

}  // namespace tsc::stab
