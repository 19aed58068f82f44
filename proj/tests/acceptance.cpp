// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
// with the measured quantities, and exits non-zero if any criterion fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "tsc/tsc.hpp"

#ifndef TSC_SOURCE_DIR
#error "TSC_SOURCE_DIR must point at the source tree (for configs/)"
#endif

using namespace tsc;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

bool within_rel(double value, double target, double rel) { return std::abs(value - target) <= rel * target; }

struct Outcome {
  bool pass = true;
  std::string detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + std::string("failed: ") + what;
    }
  }
  void note(const std::string& s) { detail += (detail.empty() ? "" : "; ") + s; }
};

std::string f(const char* fmt, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, v);
  return buf;
}

// ---------------------------------------------------------------------------

Outcome counting() {
  Outcome o;
  const auto t0 = Clock::now();
  const std::pair<int, double> params[] = {{18, 11.69e6}, {34, 21.80e6}, {50, 25.56e6}, {101, 44.55e6}};
  for (const auto& [depth, target] : params) {
    const double p = static_cast<double>(cx::resnet_params(resnet_preset(depth)));
    o.check(within_rel(p, target, 0.005), "ResNet-" + std::to_string(depth) + " params " + f("%.0f", p));
  }
  const NetworkSpec r50 = resnet_preset(50);
  const double base = static_cast<double>(cx::resnet_params(r50));
  const double train_total = base + static_cast<double>(cx::exact_overhead(ControllerKind::lstm, r50, 8));
  const double infer_total =
      base + static_cast<double>(cx::exact_overhead(ControllerKind::lstm, r50, 8, cx::Phase::inference));
  o.check(within_rel(train_total, 27.83e6, 0.005), "train total " + f("%.0f", train_total));
  o.check(within_rel(infer_total, 25.57e6, 0.001), "inference total " + f("%.0f", infer_total));

  const char* expected[4][3] = {{"[320,32]×1", "[64,32]×4", "[32,256]×1"},
                                {"[640,64]×1", "[128,64]×4", "[64,512]×1"},
                                {"[1280,128]×1", "[256,128]×4", "[128,1024]×1"},
                                {"[2560,256]×1", "[512,256]×4", "[256,2048]×1"}};
  const auto rows = cx::fc_shape_table(r50, 8);
  std::size_t matched = 0;
  for (std::size_t s = 0; s < std::min<std::size_t>(rows.size(), 4); ++s) {
    matched += rows[s].input.text == expected[s][0];
    matched += rows[s].lstm.text == expected[s][1];
    matched += rows[s].output.text == expected[s][2];
  }
  o.check(rows.size() == 4 && matched == 12, "fc shape table matched " + std::to_string(matched) + "/12");

  const double fl50 = static_cast<double>(cx::resnet_flops(r50));
  const double fl18 = static_cast<double>(cx::resnet_flops(resnet_preset(18)));
  o.check(within_rel(fl50, 3.86e9, 0.10), "ResNet-50 MACs " + f("%.4g", fl50));
  o.check(within_rel(fl18, 1.81e9, 0.10), "ResNet-18 MACs " + f("%.4g", fl18));
  const double dt = seconds_since(t0);
  o.check(dt < 1.0, "runtime " + f("%.3fs", dt));
  o.note("R50 train " + f("%.0f", train_total) + ", infer " + f("%.0f", infer_total) + ", MACs " + f("%.4g", fl50) +
         ", " + f("%.3fs", dt));
  return o;
}

// ---------------------------------------------------------------------------

ode::Rhs decay(double lambda) {
  return [lambda](double, const ode::State& y) { return ode::State{lambda * y[0]}; };
}

double euler_max_error(std::size_t n) {
  const auto tr = ode::integrate_fixed(ode::Ivp{decay(-4.0), {1.0}, 2.0}, 2.0 / static_cast<double>(n),
                                       ode::FixedMethod::euler);
  double e = 0.0;
  for (const auto& s : tr.steps) e = std::max(e, std::abs(s.y[0] - std::exp(-4.0 * s.t)));
  return e;
}

Outcome ode_layer() {
  Outcome o;
  const auto t0 = Clock::now();
  const double lambda = -4.0, eps = 1e-3;
  double worst_closed = 0.0, worst_amp = 0.0;
  // Dyadic steps divide T = 3 exactly, so every step has length h.
  for (double h : {0.0625, 0.125, 0.25, 0.375, 0.5, 0.75}) {
    const auto a = ode::integrate_fixed(ode::Ivp{decay(lambda), {1.0}, 3.0}, h, ode::FixedMethod::euler);
    const auto b = ode::integrate_fixed(ode::Ivp{decay(lambda), {1.0 + eps}, 3.0}, h, ode::FixedMethod::euler);
    for (std::size_t j = 0; j < a.steps.size(); ++j) {
      worst_closed = std::max(worst_closed, std::abs(a.steps[j].y[0] - std::pow(1 + h * lambda, j)));
    }
    const double n = static_cast<double>(a.steps.size() - 1);
    const double amp = std::abs(b.final_step().y[0] - a.final_step().y[0]);
    worst_amp = std::max(worst_amp, std::abs(amp - std::pow(std::abs(1 + h * lambda), n) * eps));
  }
  o.check(worst_closed <= 1e-12, "Euler closed form error " + f("%.3g", worst_closed));
  o.check(worst_amp <= 1e-12, "amplification error " + f("%.3g", worst_amp));

  ode::AdaptiveConfig cfg;
  cfg.tol = 1e-4;
  const auto tr = ode::integrate_adaptive(ode::Ivp{decay(lambda), {1.0}, 2.0}, cfg);
  double rkf_err = 0.0;
  for (const auto& s : tr.steps)
    if (s.accepted) rkf_err = std::max(rkf_err, std::abs(s.y[0] - std::exp(lambda * s.t)));
  o.check(rkf_err <= 1e-3, "RKF max error " + f("%.3g", rkf_err));
  // Smallest Euler step count reaching the same accuracy: doubling, then bisection.
  std::size_t hi = 8;
  while (euler_max_error(hi) > rkf_err) hi *= 2;
  std::size_t lo = hi / 2;
  while (hi - lo > 1) {
    const std::size_t mid = (lo + hi) / 2;
    (euler_max_error(mid) <= rkf_err ? hi : lo) = mid;
  }
  const double ratio = static_cast<double>(hi) / static_cast<double>(tr.accepted);
  o.check(ratio >= 5.0, "Euler/RKF step ratio " + f("%.1f", ratio));
  const double dt = seconds_since(t0);
  o.check(dt < 5.0, "runtime " + f("%.2fs", dt));
  o.note("RKF " + std::to_string(tr.accepted) + " accepted steps, max error " + f("%.2e", rkf_err) + "; Euler needs " +
         std::to_string(hi) + " steps (" + f("%.0fx", ratio) + "); " + f("%.2fs", dt));
  return o;
}

// ---------------------------------------------------------------------------

Outcome perturbation_bound() {
  Outcome o;
  const auto t0 = Clock::now();
  Rng pick(20240917);
  const ControllerKind kinds[] = {ControllerKind::fixed, ControllerKind::indp, ControllerKind::twofc,
                                  ControllerKind::lstm};
  const std::size_t nets = 50, trials = 1000;
  double min_slack = INFINITY, max_ratio = 0.0;
  std::size_t violations = 0;
  for (std::size_t n = 0; n < nets; ++n) {
    const std::size_t depth = 1 + pick() % 10, width = 1 + pick() % 32, size = 1 + pick() % 2;
    NetworkSpec s;
    s.input_channels = width;
    s.num_classes = 2;
    s.stem_channels = width;
    s.input_height = s.input_width = size;
    s.stages = {StageSpec{depth, width, BlockKind::plain, false}};
    ctrl::ControllerConfig cc;
    cc.kind = kinds[n % 4];
    // The lstm and 2fc hidden width C/r must be a whole number.
    if (cc.kind == ControllerKind::lstm || cc.kind == ControllerKind::twofc) cc.reduction = 1;
    cc.fixed_step = uniform(pick, 0.05, 1.0);
    Network net = build_network(s, cc, fork_seed(99, n));
    for (auto& p : net.params) {
      if (p.role == ParamRole::step_logit)
        for (double& v : p.value.storage()) v = normal(pick, 0.0, 2.0);
      if (p.controller && p.role == ParamRole::ctrl_weight && p.name.ends_with("w_out"))
        for (double& v : p.value.storage()) v = normal(pick, 0.0, 0.5);
    }
    Tensor y0(Shape{width, size, size});
    for (double& v : y0.storage()) v = normal(pick);
    const auto rep = stab::measure_amplification(net, y0, 1e-3, trials, fork_seed(7, n));
    if (rep.amplification_max > rep.bound + 1e-9) ++violations;
    min_slack = std::min(min_slack, rep.slack);
    max_ratio = std::max(max_ratio, rep.amplification_max / rep.bound);
  }
  o.check(violations == 0, std::to_string(violations) + " networks exceeded the bound");
  const double dt = seconds_since(t0);
  o.check(dt < 120.0, "runtime " + f("%.1fs", dt));
  o.note(std::to_string(nets) + " networks x " + std::to_string(trials) + " trials, min slack " + f("%.3g", min_slack) +
         ", max amplification/bound " + f("%.3f", max_ratio) + ", " + f("%.1fs", dt));
  return o;
}

// ---------------------------------------------------------------------------

Outcome gradients() {
  Outcome o;
  const auto t0 = Clock::now();
  std::string summary;
  for (ControllerKind k : {ControllerKind::lstm, ControllerKind::twofc, ControllerKind::indp}) {
    ctrl::ControllerConfig cc;
    cc.kind = k;
    Network net = build_network(cifar_style_spec(2, 2, 2, 3, {4, 8}, 2), cc, 5);
    Rng rng(6);
    Tensor x(Shape{3, 2, 2, 2});
    for (double& v : x.storage()) v = normal(rng);
    const std::vector<int> labels{0, 2, 1};
    GradcheckOptions opt;
    opt.rtol = 1e-4;
    std::size_t tensors = 0, ctrl_tensors = 0, entries = 0;
    double worst = 0.0;
    for (const auto& r : network_gradcheck(net, x, labels, opt)) {
      ++tensors;
      ctrl_tensors += net.params[net.find(r.name)].controller ? 1 : 0;
      entries += r.result.checked;
      worst = std::max(worst, r.result.max_rel_error);
      o.check(r.result.passed, std::string(to_string(k)) + " " + r.name + f(" rel %.3g", r.result.max_rel_error));
    }
    o.check(ctrl_tensors > 0, std::string(to_string(k)) + " has no controller parameters");
    summary += std::string(summary.empty() ? "" : ", ") + to_string(k) + ": " + std::to_string(tensors) +
               " tensors/" + std::to_string(entries) + " entries, worst rel " + f("%.2g", worst);
  }
  const double dt = seconds_since(t0);
  o.check(dt < 120.0, "runtime " + f("%.1fs", dt));
  o.note(summary + ", " + f("%.1fs", dt));
  return o;
}

// ---------------------------------------------------------------------------

Tensor random_batch(const NetworkSpec& s, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Tensor x(Shape{n, s.input_channels, s.input_height, s.input_width});
  for (double& v : x.storage()) v = normal(rng);
  return x;
}

Outcome controllers() {
  Outcome o;
  const ControllerKind kinds[] = {ControllerKind::indp, ControllerKind::twofc, ControllerKind::lstm};
  const NetworkSpec specs[] = {cifar_style_spec(3, 4, 4, 5, {8, 16, 32}, 3),
                               cifar_style_spec(3, 4, 4, 5, {16, 32}, 2, BlockKind::bottleneck)};
  std::size_t zero_checked = 0, range_checked = 0;
  double worst_bake = 0.0;
  double lo = 1.0, hi = 0.0;
  for (const NetworkSpec& spec : specs) {
    for (ControllerKind k : kinds) {
      ctrl::ControllerConfig zc;
      zc.kind = k;
      zc.init = ctrl::ControllerInit::zero;
      for (const auto& row : export_step_sizes(build_network(spec, zc, 1))) {
        for (double v : row.dt.data()) {
          o.check(v == 0.5, std::string(to_string(k)) + " zero-init step " + f("%.17g", v));
          ++zero_checked;
        }
      }
      for (std::uint64_t seed = 0; seed < 10; ++seed) {
        ctrl::ControllerConfig cc;
        cc.kind = k;
        Network net = build_network(spec, cc, seed);
        // Move away from the 0.5 fixpoint so the range check sees varied steps.
        Rng rng(fork_seed(seed, 3));
        for (auto& p : net.params) {
          if (p.role == ParamRole::step_logit || (p.controller && p.name.ends_with("w_out")))
            for (double& v : p.value.storage()) v = normal(rng, 0.0, 1.0);
        }
        for (const auto& row : export_step_sizes(net)) {
          for (double v : row.dt.data()) {
            o.check(v > 0.0 && v < 1.0, "step outside (0,1): " + f("%.17g", v));
            lo = std::min(lo, v);
            hi = std::max(hi, v);
            ++range_checked;
          }
        }
        if (seed < 3) {
          const Tensor x1 = random_batch(spec, 4, 100 + seed), x2 = random_batch(spec, 3, 200 + seed);
          ForwardOptions eval;
          eval.mode = Mode::eval;
          ad::Tape t1, t2, t3;
          const auto r1 = network_forward(net, t1, x1, eval);
          const auto r2 = network_forward(net, t2, x2, eval);
          for (std::size_t b = 0; b < r1.steps.size(); ++b) {
            o.check(r1.steps[b].value() == r2.steps[b].value(), "steps depend on the batch");
          }
          Network baked = bake(net);
          const Tensor live = r1.logits.value();
          const Tensor frozen = network_forward(baked, t3, x1, eval).logits.value();
          worst_bake = std::max(worst_bake, max_abs_diff(live.data(), frozen.data()));
          o.check(baked.controller_parameter_count() == 0, "bake kept controller parameters");
        }
      }
    }
  }
  o.check(worst_bake <= 1e-12, "baked vs live difference " + f("%.3g", worst_bake));
  o.note(std::to_string(zero_checked) + " zero-init steps all 0.5; " + std::to_string(range_checked) +
         " steps in [" + f("%.4f", lo) + ", " + f("%.4f", hi) + "]; baked vs live max diff " + f("%.2g", worst_bake));
  return o;
}

// ---------------------------------------------------------------------------

Outcome deviation_curve() {
  Outcome o;
  const double scales[] = {0.0, 1e-3, 1e-2, 1e-1};
  std::string curves;
  NetworkSpec plain;
  plain.input_channels = 3;
  plain.num_classes = 4;
  plain.stem_channels = 6;
  plain.input_height = plain.input_width = 3;
  plain.stages = {StageSpec{4, 6, BlockKind::plain, false}};
  const NetworkSpec specs[] = {cifar_style_spec(3, 4, 4, 4, {6, 12}, 3), plain};
  for (std::size_t i = 0; i < 2; ++i) {
    for (ControllerKind k : {ControllerKind::lstm, ControllerKind::fixed}) {
      ctrl::ControllerConfig cc;
      cc.kind = k;
      cc.reduction = 2;
      Network net = build_network(specs[i], cc, 40 + i);
      const Tensor x = random_batch(specs[i], 5, 41 + i);
      const std::vector<int> labels{0, 1, 2, 3, 1};
      const auto curve = gradient_deviation_curve(net, x, labels, scales);
      o.check(curve[0].max_deviation == 0.0, "deviation at zero steps " + f("%.3g", curve[0].max_deviation));
      for (std::size_t j = 1; j < curve.size(); ++j) {
        o.check(curve[j].max_deviation >= curve[j - 1].max_deviation, "curve not monotone");
      }
      curves += std::string(curves.empty() ? "" : " | ") + (i == 0 ? "bn/" : "plain/") + to_string(k) + ":";
      for (const auto& p : curve) curves += " " + f("%.3g", p.max_deviation);
    }
  }
  o.note("deviation over scales {0,1e-3,1e-2,1e-1}: " + curves);
  return o;
}

// ---------------------------------------------------------------------------

TrainConfig shipped_config() {
  return io::train_config_from_json(io::read_json_file(std::string(TSC_SOURCE_DIR) + "/configs/two_spirals.json"));
}

Outcome training() {
  Outcome o;
  const auto t0 = Clock::now();
  const TrainConfig base = shipped_config();
  const std::uint64_t seeds_list[] = {1, 2, 3, 4, 5};
  const std::vector<double> levels{0.0, 0.25, 0.5, 1.0, 2.0};
  struct Variant {
    const char* name;
    ControllerKind kind;
    double step;
    double acc = 0.0;
    double top_noise_loss = 0.0;
  };
  Variant variants[] = {{"tsc_lstm", ControllerKind::lstm, 1.0},
                        {"dt=1", ControllerKind::fixed, 1.0},
                        {"dt=0.01", ControllerKind::fixed, 0.01}};
  double first_lo = 1.0, first_hi = 0.0;
  for (Variant& v : variants) {
    for (std::uint64_t s : seeds_list) {
      TrainConfig cfg = base;
      cfg.seed = s;
      cfg.controller.kind = v.kind;
      cfg.controller.fixed_step = v.step;
      TrainResult r = train(cfg);
      v.acc += r.record.epochs.back().test_accuracy / 5.0;
      const auto sweep = noise_sweep(r.network, r.data.test, levels, 5, 9);
      v.top_noise_loss += sweep.back().loss / 5.0;
      if (v.kind == ControllerKind::lstm) {
        for (const auto& st : r.record.final_steps) {
          if (st.block != 0) continue;
          first_lo = std::min(first_lo, st.mean);
          first_hi = std::max(first_hi, st.mean);
        }
      }
    }
  }
  const Variant &tsc = variants[0], &big = variants[1], &small = variants[2];
  o.check(tsc.acc >= big.acc - 0.005, "(a) TSC accuracy below the dt=1 baseline minus 0.5 points");
  o.check(tsc.acc >= small.acc + 0.02, "(a) TSC accuracy not 2 points above dt=0.01");
  o.check(big.top_noise_loss >= tsc.top_noise_loss, "(b) dt=1 loss at the highest noise below TSC loss");
  o.check(first_lo >= 0.4 && first_hi <= 0.6, "(c) first-block step means outside [0.4, 0.6]");
  const double dt = seconds_since(t0);
  o.check(dt < 1800.0, "runtime " + f("%.0fs", dt));
  o.note("test acc tsc " + f("%.4f", tsc.acc) + ", dt=1 " + f("%.4f", big.acc) + ", dt=0.01 " + f("%.4f", small.acc) +
         "; loss at sigma=2: dt=1 " + f("%.3f", big.top_noise_loss) + ", tsc " + f("%.3f", tsc.top_noise_loss) +
         "; first-block means [" + f("%.3f", first_lo) + ", " + f("%.3f", first_hi) + "]; " + f("%.0fs", dt));
  return o;
}

// ---------------------------------------------------------------------------

Outcome determinism() {
  Outcome o;
  TrainConfig cfg = shipped_config();
  cfg.seed = 11;
  cfg.epochs = 5;
  cfg.lr = optim::LrSchedule::halves_and_quarters(cfg.lr.initial, cfg.epochs);
  const TrainResult a = train(cfg), b = train(cfg);
  o.check(a.record == b.record, "RunRecord differs between identical runs");
  RunRecord bw = b.record;
  bw.wall_time_seconds = a.record.wall_time_seconds;
  o.check(io::to_json(a.record).dump() == io::to_json(bw).dump(), "serialized RunRecord differs");
  o.check(io::checkpoint_json(a.network).dump() == io::checkpoint_json(b.network).dump(), "checkpoints differ");
  o.check(io::run_record_csv(a.record) == io::run_record_csv(b.record), "CSV differs");
  o.note("two runs of seed 11: RunRecord, CSV and checkpoint byte-identical");
  return o;
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    std::function<Outcome()> run;
  };
  const Criterion criteria[] = {
      {"1 counting reproduction", counting},
      {"2 ODE layer oracles", ode_layer},
      {"3 perturbation bound", perturbation_bound},
      {"4 gradient correctness", gradients},
      {"5 controller fixpoints and invariants", controllers},
      {"6 gradient deviation diagnostic", deviation_curve},
      {"7 desk-scale training analogs", training},
      {"8 determinism", determinism},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    failed += o.pass ? 0 : 1;
    std::printf("%s criterion %s: %s\n", o.pass ? "PASS" : "FAIL", c.name, o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
