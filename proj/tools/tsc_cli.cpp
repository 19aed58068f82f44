// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: training, evaluation, sweeps, counting and
// numerical checks. Tables go to stdout as CSV or JSON.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tsc/tsc.hpp"

namespace {

using namespace tsc;
using io::json;

struct ConfigFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> batch_size;
  std::optional<double> lr;
  std::optional<std::string> controller;
  std::optional<double> fixed_step;
  std::optional<double> weight_decay;

  void attach(CLI::App* cmd, bool seed_required) {
    cmd->add_option("-c,--config", config, "JSON training config")->check(CLI::ExistingFile);
    auto* s = cmd->add_option("--seed", seed, "master seed");
    if (seed_required) s->required();
    cmd->add_option("--epochs", epochs, "override epochs");
    cmd->add_option("--batch-size", batch_size, "override batch size");
    cmd->add_option("--lr", lr, "override initial learning rate");
    cmd->add_option("--controller", controller, "fixed | indp | 2fc | lstm");
    cmd->add_option("--fixed-step", fixed_step, "step size for the fixed controller");
    cmd->add_option("--weight-decay", weight_decay, "override weight decay");
  }

  TrainConfig resolve() const {
    json j = config.empty() ? json::object() : io::read_json_file(config);
    if (epochs) j["epochs"] = *epochs;
    if (batch_size) j["batch_size"] = *batch_size;
    if (weight_decay) j["weight_decay"] = *weight_decay;
    if (seed) j["seed"] = *seed;
    if (lr) {
      if (!j.contains("lr")) j["lr"] = json::object();
      j["lr"]["initial"] = *lr;
    }
    if (controller || fixed_step) {
      if (!j.contains("controller")) j["controller"] = json::object();
      if (controller) j["controller"]["kind"] = *controller;
      if (fixed_step) j["controller"]["fixed_step"] = *fixed_step;
    }
    TrainConfig cfg = io::train_config_from_json(j);
    if (!j.contains("network")) {
      // Default toy network for the two-spirals task.
      cfg.spec = cifar_style_spec(2, 1, 1, 2, {8, 16, 32}, 2);
    }
    return cfg;
  }
};

std::vector<double> parse_doubles(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
  return out;
}

template <class T>
std::vector<T> parse_unsigned(const std::string& s) {
  std::vector<T> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(static_cast<T>(std::stoull(item)));
  return out;
}

std::string num(double v) { return io::fmt(v); }

int cmd_train(const ConfigFlags& flags, const std::string& out_dir, bool bake_too, bool quiet) {
  const TrainConfig cfg = flags.resolve();
  const TrainResult r = train(cfg);
  std::filesystem::create_directories(out_dir);
  const auto path = [&](const char* f) { return (std::filesystem::path(out_dir) / f).string(); };
  io::write_text_file(path("config.json"), io::to_json(cfg).dump(2) + "\n");
  io::write_text_file(path("run.json"), io::to_json(r.record).dump(2) + "\n");
  io::write_text_file(path("run.csv"), io::run_record_csv(r.record));
  io::write_text_file(path("steps.csv"), io::step_table_csv(export_step_sizes(r.network)));
  io::save_checkpoint(r.network, path("checkpoint.json"));
  if (bake_too) io::save_checkpoint(bake(r.network), path("checkpoint_baked.json"));
  if (!quiet) {
    for (const auto& e : r.record.epochs) {
      std::printf("epoch %3zu  lr %-8.3g train loss %.4f acc %.4f  test loss %.4f acc %.4f  T %.4f\n", e.epoch, e.lr,
                  e.train_loss, e.train_accuracy, e.test_loss, e.test_accuracy, e.evolution_time);
    }
    std::printf("wrote %s (%.1fs)\n", out_dir.c_str(), r.record.wall_time_seconds);
  }
  return 0;
}

/// Regenerates the test split a training run with this config and seed used.
data::Dataset test_split(const ConfigFlags& flags) {
  const TrainConfig cfg = flags.resolve();
  return data::make_dataset(cfg.dataset, seeds::data(cfg.seed)).test;
}

int cmd_eval(const ConfigFlags& flags, const std::string& ckpt) {
  Network net = io::load_checkpoint(ckpt);
  const data::Dataset test = test_split(flags);
  check_compatible(net.spec, test);
  const Evaluation e = evaluate(net, test);
  std::cout << json{{"loss", e.loss}, {"accuracy", e.accuracy}, {"samples", test.size()}}.dump(2) << "\n";
  return 0;
}

int cmd_noise(const ConfigFlags& flags, const std::string& ckpt, const std::string& levels, std::size_t trials,
              std::uint64_t noise_seed) {
  Network net = io::load_checkpoint(ckpt);
  const data::Dataset test = test_split(flags);
  check_compatible(net.spec, test);
  const auto lv = parse_doubles(levels);
  std::cout << "sigma,accuracy,loss\n";
  for (const auto& p : noise_sweep(net, test, lv, trials, noise_seed)) {
    std::cout << num(p.sigma) << ',' << num(p.accuracy) << ',' << num(p.loss) << '\n';
  }
  return 0;
}

int cmd_depth(const ConfigFlags& flags, const std::string& depths, const std::string& seed_list) {
  const TrainConfig cfg = flags.resolve();
  const auto d = parse_unsigned<std::size_t>(depths);
  const auto s = parse_unsigned<std::uint64_t>(seed_list);
  std::cout << "blocks_per_stage,variant,mean_accuracy,sd_accuracy,runs\n";
  for (const auto& c : depth_sweep(cfg, d, s)) {
    std::cout << c.blocks_per_stage << ',' << c.variant << ',' << num(c.mean) << ',' << num(c.stddev) << ','
              << c.accuracies.size() << '\n';
  }
  return 0;
}

int cmd_ode(const std::string& method, double lambda, double y0, double t_end, double h, double tol) {
  const ode::Rhs rhs = [lambda](double, const ode::State& y) {
    ode::State d(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) d[i] = lambda * y[i];
    return d;
  };
  const ode::Ivp ivp{rhs, {y0}, t_end};
  ode::SolverTrace tr;
  if (method == "euler" || method == "rk4") {
    tr = ode::integrate_fixed(ivp, h, method == "euler" ? ode::FixedMethod::euler : ode::FixedMethod::rk4);
  } else if (method == "rkf") {
    ode::AdaptiveConfig cfg;
    cfg.tol = tol;
    cfg.h_init = std::min(h, cfg.h_max);
    tr = ode::integrate_adaptive(ivp, cfg);
  } else {
    throw CLI::ValidationError("--method", "expected euler, rk4 or rkf");
  }
  std::cout << "t,y0,dt,err,accepted\n";
  for (const auto& s : tr.steps) {
    std::cout << num(s.t) << ',' << num(s.y[0]) << ',' << num(s.dt) << ',' << num(s.error) << ','
              << (s.accepted ? 1 : 0) << '\n';
  }
  return 0;
}

NetworkSpec spec_for_counting(const std::optional<int>& preset, const std::string& config) {
  if (preset) return resnet_preset(*preset);
  if (!config.empty()) return io::train_config_from_json(io::read_json_file(config)).spec;
  return resnet_preset(50);
}

int cmd_complexity(const NetworkSpec& spec, const std::string& kind_name, std::size_t r, bool as_json,
                   bool fc_shapes) {
  if (fc_shapes) {
    const auto rows = cx::fc_shape_table(spec, r);
    if (as_json) {
      json a = json::array();
      for (const auto& row : rows)
        a.push_back({{"stage", row.stage}, {"input", row.input.text}, {"lstm", row.lstm.text},
                     {"output", row.output.text}});
      std::cout << a.dump(2) << "\n";
    } else {
      std::printf("%-6s %-22s %-16s %-16s\n", "stage", "input fc", "lstm", "output fc");
      for (const auto& row : rows) {
        std::printf("%-6zu %-22s %-16s %-16s\n", row.stage + 1, row.input.text.c_str(), row.lstm.text.c_str(),
                    row.output.text.c_str());
      }
    }
    return 0;
  }
  const ControllerKind kind = controller_kind_from_string(kind_name);
  const auto rep = cx::complexity_report(spec, kind, r);
  if (as_json) {
    json stages = json::array();
    for (const auto& s : rep.stages) {
      stages.push_back({{"stage", s.stage},
                        {"blocks", s.blocks},
                        {"channels", s.channels},
                        {"overhead_train", s.overhead_train},
                        {"overhead_inference", s.overhead_inference}});
    }
    std::cout << json{{"controller", to_string(rep.kind)},
                      {"reduction", rep.reduction},
                      {"base_params", rep.base_params},
                      {"params_train", rep.params_train},
                      {"params_infer", rep.params_infer},
                      {"flops_infer", rep.flops_infer},
                      {"controller_overhead_train", rep.controller_overhead_train},
                      {"controller_overhead_infer", rep.controller_overhead_infer},
                      {"overhead_estimate", cx::overhead_estimate(kind, spec, rep.reduction)},
                      {"stages", stages}}
                     .dump(2)
              << "\n";
    return 0;
  }
  std::printf("controller %s, r = %zu\n", to_string(rep.kind), rep.reduction);
  std::printf("%-30s %15zu\n", "network parameters", rep.base_params);
  std::printf("%-30s %15zu\n", "controller overhead (train)", rep.controller_overhead_train);
  std::printf("%-30s %15zu\n", "controller overhead (infer)", rep.controller_overhead_infer);
  std::printf("%-30s %15zu\n", "total parameters (train)", rep.params_train);
  std::printf("%-30s %15zu\n", "total parameters (infer)", rep.params_infer);
  std::printf("%-30s %15zu\n", "multiply-accumulates", rep.flops_infer);
  std::printf("%-30s %15zu\n", "closed-form estimate", cx::overhead_estimate(kind, spec, rep.reduction));
  std::printf("\n%-6s %-7s %-9s %15s %15s\n", "stage", "blocks", "channels", "train", "infer");
  for (const auto& s : rep.stages) {
    std::printf("%-6zu %-7zu %-9zu %15zu %15zu\n", s.stage + 1, s.blocks, s.channels, s.overhead_train,
                s.overhead_inference);
  }
  return 0;
}

NetworkSpec plain_spec(std::size_t width, std::size_t depth, std::size_t size) {
  NetworkSpec s;
  s.input_channels = width;
  s.num_classes = 2;
  s.stem_channels = width;
  s.input_height = s.input_width = size;
  s.stages = {StageSpec{depth, width, BlockKind::plain, false}};
  return s;
}

int cmd_stability(const std::string& ckpt, std::size_t width, std::size_t depth, std::size_t size,
                  const std::string& kind, double eps, std::size_t trials, std::uint64_t seed) {
  Network net;
  if (!ckpt.empty()) {
    net = io::load_checkpoint(ckpt);
  } else {
    ctrl::ControllerConfig cc;
    cc.kind = controller_kind_from_string(kind);
    net = build_network(plain_spec(width, depth, size), cc, seed);
  }
  const std::size_t C = net.spec.stem_channels, H = net.stem.geom.conv.out_size(net.spec.input_height),
                    W = net.stem.geom.conv.out_size(net.spec.input_width);
  Rng rng(fork_seed(seed, 7));
  Tensor y0(Shape{C, H, W});
  for (double& v : y0.storage()) v = normal(rng);
  const auto rep = stab::measure_amplification(net, y0, eps, trials, seed);
  json layers = json::array();
  for (std::size_t j = 0; j < rep.sigmas.size(); ++j) layers.push_back({{"sigma", rep.sigmas[j]}, {"dt", rep.steps[j]}});
  std::cout << json{{"epsilon", rep.epsilon},
                    {"trials", rep.trials},
                    {"amplification_max", rep.amplification_max},
                    {"amplification_mean", rep.amplification_mean},
                    {"bound", rep.bound},
                    {"slack", rep.slack},
                    {"layers", layers}}
                   .dump(2)
            << "\n";
  return rep.slack >= -1e-9 ? 0 : 1;
}

int cmd_export(const std::string& ckpt) {
  const Network net = io::load_checkpoint(ckpt);
  std::cout << io::step_table_csv(export_step_sizes(net));
  return 0;
}

int cmd_gradcheck(const std::string& kind, std::uint64_t seed, double rtol) {
  ctrl::ControllerConfig cc;
  cc.kind = controller_kind_from_string(kind);
  Network net = build_network(cifar_style_spec(2, 2, 2, 3, {4, 8}, 2), cc, seed);
  Rng rng(fork_seed(seed, 1));
  Tensor x(Shape{3, 2, 2, 2});
  for (double& v : x.storage()) v = normal(rng);
  const std::vector<int> labels{0, 2, 1};
  GradcheckOptions opt;
  opt.rtol = rtol;
  bool ok = true;
  std::printf("%-40s %8s %12s %12s\n", "parameter", "checked", "max abs err", "max rel err");
  for (const auto& r : network_gradcheck(net, x, labels, opt)) {
    std::printf("%-40s %8zu %12.3g %12.3g %s\n", r.name.c_str(), r.result.checked, r.result.max_abs_error,
                r.result.max_rel_error, r.result.passed ? "" : "FAIL");
    ok = ok && r.result.passed;
  }
  std::printf("%s\n", ok ? "all parameters pass" : "gradient mismatch");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Residual networks with adaptive step sizes: training, sweeps and numerical checks"};
  app.require_subcommand(1);

  ConfigFlags train_flags, eval_flags, noise_flags, depth_flags;
  std::string out_dir = "run", ckpt;
  bool bake_too = false, quiet = false;
  auto* train_cmd = app.add_subcommand("train", "train network and controller jointly");
  train_flags.attach(train_cmd, true);
  train_cmd->add_option("-o,--out", out_dir, "output directory");
  train_cmd->add_flag("--bake", bake_too, "also write a baked checkpoint");
  train_cmd->add_flag("-q,--quiet", quiet, "no per-epoch output");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  eval_flags.attach(eval_cmd, true);
  eval_cmd->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingFile);

  std::string levels = "0,0.25,0.5,1,2";
  std::size_t trials = 5;
  std::uint64_t noise_seed = 0;
  auto* noise_cmd = app.add_subcommand("noise-sweep", "accuracy and loss under Gaussian input noise");
  noise_flags.attach(noise_cmd, true);
  noise_cmd->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingFile);
  noise_cmd->add_option("--levels", levels, "comma-separated noise standard deviations");
  noise_cmd->add_option("--trials", trials, "noise draws per level");
  noise_cmd->add_option("--noise-seed", noise_seed);

  std::string depths = "1,2,4", seed_list = "1,2,3";
  auto* depth_cmd = app.add_subcommand("depth-sweep", "baseline vs controller accuracy over depth");
  depth_flags.attach(depth_cmd, false);
  depth_cmd->add_option("--depths", depths, "blocks per stage, comma-separated");
  depth_cmd->add_option("--seeds", seed_list, "comma-separated seeds");

  std::string method = "euler";
  double lambda = -4.0, y0 = 1.0, t_end = 3.0, h = 0.1, tol = 1e-4;
  auto* ode_cmd = app.add_subcommand("ode-demo", "integrate y' = lambda*y and print the trace");
  ode_cmd->add_option("--method", method, "euler | rk4 | rkf");
  ode_cmd->add_option("--lambda", lambda);
  ode_cmd->add_option("--y0", y0);
  ode_cmd->add_option("--t-end", t_end);
  ode_cmd->add_option("--step", h, "fixed step, or the initial step for rkf");
  ode_cmd->add_option("--tol", tol, "rkf tolerance");

  std::optional<int> preset;
  std::string count_config, count_kind = "lstm";
  std::size_t reduction = 0;
  bool as_json = false, fc_shapes = false;
  auto* cx_cmd = app.add_subcommand("complexity", "parameter and multiply-accumulate counts");
  cx_cmd->add_option("--preset", preset, "ResNet depth: 18, 34, 50 or 101 (default 50)");
  cx_cmd->add_option("-c,--config", count_config, "take the network from a training config")
      ->check(CLI::ExistingFile);
  cx_cmd->add_option("--controller", count_kind, "fixed | indp | 2fc | lstm");
  cx_cmd->add_option("-r,--reduction", reduction, "controller reduction ratio (0 = default)");
  cx_cmd->add_flag("--json", as_json);
  cx_cmd->add_flag("--fc-shapes", fc_shapes, "print the LSTM controller fc shapes per stage");

  std::size_t width = 8, depth = 6, size = 2, st_trials = 1000;
  std::string st_kind = "indp";
  double eps = 1e-3;
  std::uint64_t st_seed = 0;
  auto* st_cmd = app.add_subcommand("stability-check", "perturbation amplification against the product bound");
  st_cmd->add_option("--checkpoint", ckpt, "plain network checkpoint (default: random network)");
  st_cmd->add_option("--width", width);
  st_cmd->add_option("--depth", depth);
  st_cmd->add_option("--size", size, "spatial height and width");
  st_cmd->add_option("--controller", st_kind);
  st_cmd->add_option("--epsilon", eps);
  st_cmd->add_option("--trials", st_trials);
  st_cmd->add_option("--seed", st_seed);

  auto* export_cmd = app.add_subcommand("export-steps", "per-block step sizes as CSV");
  export_cmd->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingFile);

  std::string gc_kind = "lstm";
  std::uint64_t gc_seed = 1;
  double gc_rtol = 1e-4;
  auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference check of every parameter of a toy network");
  gc_cmd->add_option("--controller", gc_kind);
  gc_cmd->add_option("--seed", gc_seed);
  gc_cmd->add_option("--rtol", gc_rtol);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) return cmd_train(train_flags, out_dir, bake_too, quiet);
    if (*eval_cmd) return cmd_eval(eval_flags, ckpt);
    if (*noise_cmd) return cmd_noise(noise_flags, ckpt, levels, trials, noise_seed);
    if (*depth_cmd) return cmd_depth(depth_flags, depths, seed_list);
    if (*ode_cmd) return cmd_ode(method, lambda, y0, t_end, h, tol);
    if (*cx_cmd) return cmd_complexity(spec_for_counting(preset, count_config), count_kind, reduction, as_json, fc_shapes);
    if (*st_cmd) return cmd_stability(ckpt, width, depth, size, st_kind, eps, st_trials, st_seed);
    if (*export_cmd) return cmd_export(ckpt);
    if (*gc_cmd) return cmd_gradcheck(gc_kind, gc_seed, gc_rtol);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
