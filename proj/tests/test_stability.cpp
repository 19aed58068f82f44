// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "tsc/stability.hpp"

using namespace tsc;
using namespace tsc::stab;

namespace {

// Cyclic Jacobi eigenvalues of a symmetric n×n matrix (row-major).
std::vector<double> jacobi_eigenvalues(std::vector<double> a, std::size_t n) {
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a[i * n + i];
  return ev;
}

// σ_max via the eigenvalues of WᵀW.
double jacobi_sigma_max(const Tensor& w) {
  const std::size_t m = w.dim(0), n = w.dim(1);
  std::vector<double> g(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < m; ++k) g[i * n + j] += w[k * n + i] * w[k * n + j];
  const auto ev = jacobi_eigenvalues(g, n);
  return std::sqrt(std::max(0.0, *std::max_element(ev.begin(), ev.end())));
}

Tensor random_matrix(std::size_t m, std::size_t n, Rng& rng) {
  Tensor t(Shape{m, n});
  for (double& v : t.storage()) v = normal(rng);
  return t;
}

NetworkSpec plain_net(std::size_t width, std::size_t depth, std::size_t hw) {
  NetworkSpec s;
  s.input_channels = 2;
  s.num_classes = 2;
  s.stem_channels = width;
  s.input_height = s.input_width = hw;
  s.stages = {StageSpec{depth, width, BlockKind::plain, false}};
  return s;
}

}  // namespace

TEST(LinearStability, HandValues) {
  EXPECT_DOUBLE_EQ(linear_stability_factor(-4, 0.25), 0.0);
  EXPECT_DOUBLE_EQ(linear_stability_factor(-4, 0.5), 1.0);
  EXPECT_DOUBLE_EQ(linear_stability_factor(-4, 1.0), 3.0);
}

TEST(SpectralNorm, SimpleMatrices) {
  Tensor eye(Shape{5, 5});
  for (std::size_t i = 0; i < 5; ++i) eye[i * 5 + i] = 1.0;
  EXPECT_NEAR(spectral_norm(eye).value, 1.0, 1e-14);
  Tensor d(Shape{3, 3});
  d[0] = 1;
  d[4] = 2;
  d[8] = 3;
  EXPECT_NEAR(spectral_norm(d).value, 3.0, 1e-12);
  const auto z = spectral_norm(Tensor(Shape{4, 3}));
  EXPECT_EQ(z.value, 0.0);
  EXPECT_EQ(z.iterations, 0u);
  EXPECT_THROW(spectral_norm(Tensor(Shape{3})), std::invalid_argument);
}

TEST(SpectralNorm, MatchesJacobiOracle) {
  Rng rng(42);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = 1 + rng() % 64, n = 1 + rng() % 64;
    const Tensor w = random_matrix(m, n, rng);
    const auto est = spectral_norm(w);
    const double ref = jacobi_sigma_max(w);
    EXPECT_NEAR(est.value, ref, 1e-6 * ref) << m << "x" << n;
    EXPECT_LE(est.value, frobenius_norm(w) * (1 + 1e-12));
    EXPECT_GE(est.value, 0.0);
  }
}

TEST(SpectralNorm, ScaleEquivariant) {
  Rng rng(7);
  const Tensor w = random_matrix(12, 9, rng);
  const double base = spectral_norm(w).value;
  for (double c : {-3.0, 0.5, 10.0}) {
    Tensor cw = w;
    for (double& v : cw.storage()) v *= c;
    EXPECT_NEAR(spectral_norm(cw).value, std::abs(c) * base, 1e-9 * std::abs(c) * base);
  }
}

TEST(ConvOperator, MatchesConvolution) {
  Rng rng(3);
  Tensor w(Shape{3, 2, 3, 3});
  for (double& v : w.storage()) v = normal(rng);
  Tensor x(Shape{2, 4, 4});
  for (double& v : x.storage()) v = normal(rng);
  const Tensor m = conv_operator_matrix(w, 4, 4, 1, 1);
  ad::Tape t;
  const Tensor y = ad::conv2d(t.constant(x), t.constant(w), 1, 1).value();
  ASSERT_EQ(m.dim(0), y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    double s = 0;
    for (std::size_t j = 0; j < x.size(); ++j) s += m[i * x.size() + j] * x[j];
    EXPECT_NEAR(s, y[i], 1e-12);
  }
}

TEST(AmplificationBound, HandValues) {
  const std::vector<double> zero{0.0, 0.0}, halves{0.5, 0.5};
  EXPECT_DOUBLE_EQ(amplification_bound(zero, halves, 0.3), 0.3);
  EXPECT_DOUBLE_EQ(amplification_bound(std::vector<double>{2.0}, std::vector<double>{0.5}, 1.0), 2.0);
  EXPECT_NEAR(amplification_bound(std::vector<double>{2.0, 2.0}, halves, 0.1), 0.4, 1e-15);
  EXPECT_THROW(amplification_bound(std::vector<double>{-1.0}, std::vector<double>{0.5}, 1.0), std::invalid_argument);
  EXPECT_THROW(amplification_bound(std::vector<double>{1.0}, halves, 1.0), std::invalid_argument);
}

TEST(AmplificationBound, MonotoneInSteps) {
  const std::vector<double> s{1.5, 0.3, 2.0};
  double prev = 0;
  for (double scale : {0.0, 0.1, 0.5, 1.0, 2.0}) {
    const std::vector<double> dt{0.2 * scale, 0.7 * scale, 0.4 * scale};
    const double b = amplification_bound(s, dt, 1e-3);
    EXPECT_GE(b, prev);
    prev = b;
  }
}

TEST(AmplificationBound, ChannelwiseUsesMax) {
  const std::vector<double> s{2.0};
  const std::vector<Tensor> dt{Tensor::vector({0.1, 0.5, 0.3})};
  EXPECT_DOUBLE_EQ(amplification_bound(s, dt, 1.0), 2.0);
}

TEST(Amplification, RejectsBatchNormAndProjection) {
  ctrl::ControllerConfig cfg;
  cfg.kind = ControllerKind::fixed;
  Network bn = build_network(cifar_style_spec(2, 2, 2, 2, {4}, 2), cfg, 1);
  EXPECT_THROW(measure_amplification(bn, Tensor(Shape{4, 2, 2}), 1e-3, 1, 0), std::invalid_argument);
  NetworkSpec two = plain_net(4, 1, 2);
  two.stages.push_back(StageSpec{1, 8, BlockKind::plain, false});
  Network proj = build_network(two, cfg, 1);
  EXPECT_THROW(measure_amplification(proj, Tensor(Shape{4, 2, 2}), 1e-3, 1, 0), std::invalid_argument);
}

TEST(Amplification, TrivialCases) {
  ctrl::ControllerConfig cfg;
  cfg.kind = ControllerKind::lstm;
  Network net = build_network(plain_net(4, 3, 2), cfg, 5);
  Rng rng(6);
  Tensor y0(Shape{4, 2, 2});
  for (double& v : y0.storage()) v = normal(rng);
  const auto r0 = measure_amplification(net, y0, 0.0, 5, 1);
  EXPECT_EQ(r0.amplification_max, 0.0);
  EXPECT_EQ(r0.bound, 0.0);
  for (auto& p : net.params)
    if (p.role == ParamRole::conv) p.value.fill(0.0);
  const auto rz = measure_amplification(net, y0, 1e-3, 20, 2);
  EXPECT_NEAR(rz.amplification_max, 1e-3, 1e-15);
  EXPECT_NEAR(rz.amplification_mean, 1e-3, 1e-15);
}

TEST(Amplification, BoundHoldsOnRandomNetworks) {
  Rng pick(11);
  for (int draw = 0; draw < 10; ++draw) {
    const std::size_t depth = 1 + pick() % 10, width = 1 + pick() % 16;
    ctrl::ControllerConfig cfg;
    cfg.kind = ControllerKind::indp;
    Network net = build_network(plain_net(width, depth, 2), cfg, 100 + draw);
    for (auto& p : net.params)
      if (p.role == ParamRole::step_logit)
        for (double& v : p.value.storage()) v = normal(pick, 0.0, 2.0);
    Tensor y0(Shape{width, 2, 2});
    for (double& v : y0.storage()) v = normal(pick);
    const auto rep = measure_amplification(net, y0, 1e-3, 200, draw);
    EXPECT_LE(rep.amplification_max, rep.bound + 1e-9) << "draw " << draw;
    EXPECT_GE(rep.slack, -1e-9);
    EXPECT_EQ(rep.sigmas.size(), depth);
  }
}

TEST(EulerStabilityCheck, ScalarAndDiagonal) {
  const VectorField lin = [](const std::vector<double>& y) { return std::vector<double>{-4.0 * y[0]}; };
  for (double h : {0.1, 0.25, 0.5, 1.0}) {
    EXPECT_NEAR(euler_stability_check(lin, {0.7}, h), linear_stability_factor(-4, h), 1e-8);
  }
  const VectorField diag = [](const std::vector<double>& y) { return std::vector<double>{-y[0], -4 * y[1]}; };
  EXPECT_NEAR(euler_stability_check(diag, {0.3, -0.2}, 0.5), 1.0, 1e-6);
}

TEST(EulerStabilityCheck, RandomSymmetricMatchesJacobi) {
  Rng rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t n = 8;
    std::vector<double> J(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i; j < n; ++j) J[i * n + j] = J[j * n + i] = normal(rng);
    const VectorField f = [&J, n](const std::vector<double>& y) {
      std::vector<double> d(n, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) d[i] += J[i * n + j] * y[j];
      return d;
    };
    const double h = 0.3;
    std::vector<double> A(n * n);
    for (std::size_t i = 0; i < n * n; ++i) A[i] = h * J[i];
    for (std::size_t i = 0; i < n; ++i) A[i * n + i] += 1.0;
    double ref = 0;
    for (double e : jacobi_eigenvalues(A, n)) ref = std::max(ref, std::abs(e));
    std::vector<double> y0(n, 0.1);
    EXPECT_NEAR(euler_stability_check(f, y0, h), ref, 0.01 * ref) << "trial " << trial;
  }
}

TEST(EulerStabilityCheck, RejectsLargeState) {
  const VectorField f = [](const std::vector<double>& y) { return y; };
  EXPECT_THROW(euler_stability_check(f, std::vector<double>(257, 0.0), 0.1), std::invalid_argument);
}
