// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "tsc/diagnostics.hpp"
#include "tsc/network.hpp"

using namespace tsc;

namespace {

Tensor random_batch(const NetworkSpec& spec, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(Shape{n, spec.input_channels, spec.input_height, spec.input_width});
  for (double& v : t.storage()) v = normal(rng);
  return t;
}

ctrl::ControllerConfig kind(ControllerKind k) {
  ctrl::ControllerConfig c;
  c.kind = k;
  return c;
}

NetworkSpec toy_spec(BlockKind k = BlockKind::basic) {
  return cifar_style_spec(2, 3, 3, 3, {8, 16, 32}, 2, k);
}

NetworkSpec plain_chain(std::size_t channels, std::size_t blocks) {
  NetworkSpec s;
  s.input_channels = 2;
  s.num_classes = 2;
  s.stem_channels = channels;
  s.input_height = s.input_width = 3;
  s.stages = {StageSpec{blocks, channels, BlockKind::plain, false}};
  return s;
}

// Direct zero-padded 3x3 convolution on one sample [C, H, W].
std::vector<double> conv3x3(const Tensor& w, const std::vector<double>& y, std::size_t C, std::size_t H,
                            std::size_t W) {
  std::vector<double> out(w.dim(0) * H * W, 0.0);
  for (std::size_t o = 0; o < w.dim(0); ++o)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        double s = 0;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t a = 0; a < 3; ++a)
            for (std::size_t b = 0; b < 3; ++b) {
              const long r = static_cast<long>(i + a) - 1, q = static_cast<long>(j + b) - 1;
              if (r < 0 || q < 0 || r >= static_cast<long>(H) || q >= static_cast<long>(W)) continue;
              s += w[((o * C + c) * 3 + a) * 3 + b] * y[(c * H + r) * W + q];
            }
        out[(o * H + i) * W + j] = s;
      }
  return out;
}

}  // namespace

TEST(BuildNetwork, StructuralCounts) {
  const Network net = build_network(toy_spec(), kind(ControllerKind::lstm), 1);
  EXPECT_EQ(net.blocks.size(), 6u);
  EXPECT_EQ(net.stages.size(), 3u);
  for (const auto& st : net.stages) EXPECT_EQ(st.lstm.size(), 12u);
  EXPECT_EQ(net.stages[0].hidden, 2u);
  EXPECT_EQ(net.stages[2].hidden, 8u);
}

TEST(BuildNetwork, PlainHasNoBatchNorm) {
  const Network net = build_network(plain_chain(4, 3), kind(ControllerKind::fixed), 1);
  EXPECT_TRUE(net.bn_stats.empty());
  for (const auto& p : net.params) {
    EXPECT_NE(p.role, ParamRole::bn_gamma);
    EXPECT_NE(p.role, ParamRole::bn_beta);
  }
}

TEST(BuildNetwork, ResNet50ParameterCount) {
  const Network net = build_network(resnet_preset(50), kind(ControllerKind::fixed), 1);
  EXPECT_EQ(net.network_parameter_count(), 25557032u);
}

TEST(BuildNetwork, LstmOverheadIndependentOfDepth) {
  auto spec2 = toy_spec();
  auto spec5 = cifar_style_spec(2, 3, 3, 3, {8, 16, 32}, 5);
  const auto a = build_network(spec2, kind(ControllerKind::lstm), 1).controller_parameter_count();
  const auto b = build_network(spec5, kind(ControllerKind::lstm), 1).controller_parameter_count();
  EXPECT_EQ(a, b);
  const auto c = build_network(spec2, kind(ControllerKind::twofc), 1).controller_parameter_count();
  const auto d = build_network(spec5, kind(ControllerKind::twofc), 1).controller_parameter_count();
  EXPECT_GT(d, c);
}

TEST(BuildNetwork, RejectsIndivisibleReduction) {
  auto cfg = kind(ControllerKind::lstm);
  cfg.reduction = 3;
  EXPECT_THROW(build_network(toy_spec(), cfg, 1), std::invalid_argument);
}

TEST(BuildNetwork, DeterministicInSeed) {
  const Network a = build_network(toy_spec(), kind(ControllerKind::lstm), 7);
  const Network b = build_network(toy_spec(), kind(ControllerKind::lstm), 7);
  const Network c = build_network(toy_spec(), kind(ControllerKind::lstm), 8);
  for (std::size_t i = 0; i < a.params.size(); ++i) EXPECT_EQ(a.params[i].value, b.params[i].value);
  EXPECT_NE(a.params[0].value, c.params[0].value);
}

TEST(BlockForward, ZeroStepIsShortcut) {
  Network net = build_network(toy_spec(), kind(ControllerKind::fixed), 2);
  ad::Tape t;
  const auto pv = register_params(net, t, false);
  ad::Var x = t.constant(Tensor(Shape{2, 8, 3, 3}, 0.3));
  ad::Var out = block_forward(net, pv, 1, x, t.constant(Tensor(Shape{8}, 0.0)), Mode::train);
  EXPECT_EQ(out.value(), x.value());
}

TEST(BlockForward, PlainBlockMatchesLoopOracle) {
  Network net = build_network(plain_chain(4, 1), kind(ControllerKind::fixed), 4);
  Rng rng(5);
  Tensor y(Shape{4, 3, 3});
  for (double& v : y.storage()) v = normal(rng);
  const Tensor dt = Tensor::vector({0.1, 0.5, 0.9, 0.3});
  ad::Tape t;
  const auto pv = register_params(net, t, false);
  const Tensor out = block_forward(net, pv, 0, t.constant(y), t.constant(dt), Mode::eval).value();
  const auto f = conv3x3(net.params[net.blocks[0].convs[0]].value, y.storage(), 4, 3, 3);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t p = 0; p < 9; ++p) {
      const std::size_t i = c * 9 + p;
      EXPECT_NEAR(out[i], y[i] + dt[c] * std::max(0.0, f[i]), 1e-12);
    }
}

TEST(BlockForward, UnitStepIsResidualRecursion) {
  auto cfg = kind(ControllerKind::fixed);
  cfg.fixed_step = 1.0;
  Network net = build_network(plain_chain(3, 3), cfg, 6);
  const Tensor x = random_batch(net.spec, 1, 7);
  ad::Tape t;
  const auto r = network_forward(net, t, x, {Mode::eval});
  // y_{j+1} = y_j + ReLU(W_j y_j), replayed with the loop oracle.
  std::vector<double> y = r.block_inputs[0].value().storage();
  for (std::size_t b = 0; b < 3; ++b) {
    const auto f = conv3x3(net.params[net.blocks[b].convs[0]].value, y, 3, 3, 3);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += std::max(0.0, f[i]);
  }
  EXPECT_LT(max_abs_diff(y, r.block_outputs[2].value().data()), 1e-12);
}

TEST(BlockForward, RejectsWrongStepLength) {
  Network net = build_network(toy_spec(), kind(ControllerKind::fixed), 2);
  ad::Tape t;
  const auto pv = register_params(net, t, false);
  ad::Var x = t.constant(Tensor(Shape{1, 8, 3, 3}));
  EXPECT_THROW(block_forward(net, pv, 0, x, t.constant(Tensor(Shape{4})), Mode::eval), std::invalid_argument);
}

TEST(NetworkForward, ZeroInputZeroClassifierGivesUniformLogits) {
  BuildOptions o;
  o.zero_classifier = true;
  Network net = build_network(toy_spec(), kind(ControllerKind::lstm), 8, o);
  ad::Tape t;
  const Tensor logits = network_forward(net, t, Tensor(Shape{2, 2, 3, 3}), {Mode::eval}).logits.value();
  for (double v : logits.data()) EXPECT_EQ(v, 0.0);
}

TEST(NetworkForward, EvalIsDeterministicAndTrainDoesNotTouchWeights) {
  Network net = build_network(toy_spec(), kind(ControllerKind::lstm), 9);
  const Tensor x = random_batch(net.spec, 4, 10);
  const auto before = net.params;
  ad::Tape t1;
  network_forward(net, t1, x, {Mode::train});
  ad::Tape t2, t3;
  const Tensor a = network_forward(net, t2, x, {Mode::eval}).logits.value();
  const Tensor b = network_forward(net, t3, x, {Mode::eval}).logits.value();
  EXPECT_EQ(a, b);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i].value, net.params[i].value);
}

TEST(NetworkForward, MatchesBlockByBlockReplay) {
  Network net = build_network(toy_spec(BlockKind::bottleneck), kind(ControllerKind::lstm), 11);
  const Tensor x = random_batch(net.spec, 3, 12);
  ad::Tape t;
  const auto r = network_forward(net, t, x, {Mode::eval});
  ad::Tape u;
  const auto pv = register_params(net, u, false);
  const auto steps = controller_steps(net, u, pv);
  ad::Var y = stem_forward(net, pv, u.constant(x), Mode::eval);
  for (std::size_t b = 0; b < net.blocks.size(); ++b) y = block_forward(net, pv, b, y, steps[b], Mode::eval);
  const Tensor logits = ad::linear(ad::global_avg_pool(y), pv[net.fc_weight], pv[net.fc_bias]).value();
  EXPECT_EQ(logits, r.logits.value());
}

TEST(NetworkForward, RejectsWrongBatchShape) {
  Network net = build_network(toy_spec(), kind(ControllerKind::lstm), 1);
  ad::Tape t;
  EXPECT_THROW(network_forward(net, t, Tensor(Shape{1, 3, 3, 3})), std::invalid_argument);
}

TEST(NetworkForward, ImageNetStemIsCountOnly) {
  NetworkSpec s = resnet_preset(18);
  s.input_height = s.input_width = 8;
  Network net = build_network(s, kind(ControllerKind::fixed), 1);
  ad::Tape t;
  EXPECT_THROW(network_forward(net, t, Tensor(Shape{1, 3, 8, 8})), std::logic_error);
}

TEST(Steps, ZeroInitFixpointAllKinds) {
  for (ControllerKind k : {ControllerKind::indp, ControllerKind::twofc, ControllerKind::lstm}) {
    auto cfg = kind(k);
    cfg.init = ctrl::ControllerInit::zero;
    const Network net = build_network(toy_spec(), cfg, 3);
    for (const auto& row : export_step_sizes(net))
      for (double v : row.dt.data()) EXPECT_EQ(v, 0.5) << to_string(k);
  }
}

TEST(Steps, DefaultInitStartsAtHalfAndStaysInUnitInterval) {
  for (ControllerKind k : {ControllerKind::indp, ControllerKind::twofc, ControllerKind::lstm}) {
    Network net = build_network(toy_spec(), kind(k), 3);
    for (const auto& row : export_step_sizes(net)) EXPECT_EQ(row.mean, 0.5);
    // Perturb every controller parameter and check the range.
    Rng rng(4);
    for (auto& p : net.params)
      if (p.controller)
        for (double& v : p.value.storage()) v += normal(rng);
    for (const auto& row : export_step_sizes(net))
      for (double v : row.dt.data()) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
      }
  }
}

TEST(Steps, DataIndependent) {
  Network net = build_network(toy_spec(), kind(ControllerKind::lstm), 13);
  for (auto& p : net.params)
    if (p.name.ends_with("w_out")) p.value.fill(0.3);
  ad::Tape t1, t2;
  const auto a = network_forward(net, t1, random_batch(net.spec, 2, 1));
  const auto b = network_forward(net, t2, random_batch(net.spec, 5, 2));
  for (std::size_t i = 0; i < a.steps.size(); ++i) EXPECT_EQ(a.steps[i].value(), b.steps[i].value());
}

TEST(Steps, EvolutionTimeInRange) {
  Network net = build_network(toy_spec(), kind(ControllerKind::lstm), 14);
  const auto rows = export_step_sizes(net);
  const double T = evolution_time(rows);
  EXPECT_DOUBLE_EQ(T, 3.0);  // six blocks at 0.5
  EXPECT_GT(T, 0.0);
  EXPECT_LT(T, 6.0);
}

TEST(Bake, MatchesLiveEvalAndDropsController) {
  for (ControllerKind k : {ControllerKind::indp, ControllerKind::twofc, ControllerKind::lstm}) {
    Network net = build_network(toy_spec(), kind(k), 15);
    Rng rng(16);
    for (auto& p : net.params)
      if (p.controller)
        for (double& v : p.value.storage()) v += 0.5 * normal(rng);
    Network baked = bake(net);
    EXPECT_EQ(baked.controller_parameter_count(), 0u);
    EXPECT_EQ(baked.parameter_count(), net.network_parameter_count() + 2 * (8 + 16 + 32));
    for (std::uint64_t s = 0; s < 3; ++s) {
      const Tensor x = random_batch(net.spec, 3, 100 + s);
      ad::Tape t1, t2;
      const Tensor live = network_forward(net, t1, x, {Mode::eval}).logits.value();
      const Tensor frozen = network_forward(baked, t2, x, {Mode::eval}).logits.value();
      EXPECT_LT(max_abs_diff(live.data(), frozen.data()), 1e-12) << to_string(k);
    }
  }
}

TEST(Bake, ZeroInitStoresHalf) {
  auto cfg = kind(ControllerKind::lstm);
  cfg.init = ctrl::ControllerInit::zero;
  const Network baked = bake(build_network(toy_spec(), cfg, 1));
  for (const auto& t : *baked.baked_steps)
    for (double v : t.data()) EXPECT_EQ(v, 0.5);
}

TEST(GradientProfile, ZeroStepsGiveZeroDeviation) {
  Network net = build_network(toy_spec(), kind(ControllerKind::lstm), 17);
  const Tensor x = random_batch(net.spec, 4, 18);
  const std::vector<int> y{0, 1, 2, 1};
  ForwardOptions fo;
  fo.step_override = 0.0;
  std::size_t comparable = 0;
  for (const auto& e : layer_gradient_profile(net, x, y, fo)) {
    if (!e.comparable) continue;
    ++comparable;
    EXPECT_EQ(e.deviation, 0.0) << "stage " << e.stage << " block " << e.block;
  }
  EXPECT_EQ(comparable, 4u);  // entry blocks of stages 2 and 3 change width
}

TEST(GradientProfile, DeviationShrinksWithStepScale) {
  Network net = build_network(toy_spec(), kind(ControllerKind::lstm), 19);
  const Tensor x = random_batch(net.spec, 4, 20);
  const std::vector<int> y{0, 1, 2, 1};
  const std::vector<double> scales{0.0, 1e-3, 1e-2, 1e-1};
  const auto curve = gradient_deviation_curve(net, x, y, scales);
  EXPECT_EQ(curve[0].max_deviation, 0.0);
  for (std::size_t i = 1; i < curve.size(); ++i) EXPECT_GE(curve[i].max_deviation, curve[i - 1].max_deviation);
  EXPECT_GT(curve.back().max_deviation, 0.0);
}

TEST(GradientProfile, SingleBlockMatchesFiniteDifferenceVjp) {
  auto cfg = kind(ControllerKind::fixed);
  cfg.fixed_step = 0.7;
  Network net = build_network(plain_chain(3, 1), cfg, 21);
  const Tensor x = random_batch(net.spec, 1, 22);
  const std::vector<int> y{1};
  const auto prof = layer_gradient_profile(net, x, y);
  ASSERT_EQ(prof.size(), 1u);

  ad::Tape t;
  auto r = network_forward(net, t, x, {Mode::train});
  t.backward(ad::softmax_cross_entropy(r.logits, y));
  const Tensor gD = t.grad(r.block_outputs[0]);
  const Tensor y0 = r.block_inputs[0].value();
  // J = ∂(F(y)Δt)/∂y column by column; deviation = ‖Jᵀ gD‖.
  auto branch = [&](const Tensor& v) {
    ad::Tape u;
    const auto pv = register_params(net, u, false);
    ad::Var in = u.constant(v);
    return ad::sub(block_forward(net, pv, 0, in, u.constant(Tensor(Shape{3}, 0.7)), Mode::eval), in).value();
  };
  const double h = 1e-6;
  std::vector<double> vjp(y0.size(), 0.0);
  for (std::size_t j = 0; j < y0.size(); ++j) {
    Tensor p = y0, m = y0;
    p[j] += h;
    m[j] -= h;
    const Tensor fp = branch(p), fm = branch(m);
    for (std::size_t i = 0; i < y0.size(); ++i) vjp[j] += gD[i] * (fp[i] - fm[i]) / (2 * h);
  }
  EXPECT_NEAR(prof[0].deviation, l2_norm(vjp), 1e-7 * std::max(1.0, l2_norm(vjp)));
}

TEST(NetworkGradcheck, AllKindsSmallNet) {
  const NetworkSpec spec = cifar_style_spec(2, 2, 2, 3, {4, 8}, 2);
  const std::vector<int> y{0, 2, 1};
  for (ControllerKind k : {ControllerKind::indp, ControllerKind::twofc, ControllerKind::lstm}) {
    Network net = build_network(spec, kind(k), 23);
    Rng rng(24);
    for (auto& p : net.params)
      if (p.controller)
        for (double& v : p.value.storage()) v += 0.3 * normal(rng);
    const Tensor x = random_batch(spec, 3, 25);
    for (const auto& pc : network_gradcheck(net, x, y)) {
      EXPECT_TRUE(pc.result.passed) << to_string(k) << " " << pc.name << ": " << pc.result.worst;
    }
  }
}
