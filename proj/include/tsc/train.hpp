// SPDX-License-Identifier: Apache-2.0
//
// Joint training of network weights and step-size controllers, evaluation,
// and the sweep experiments built on top of them.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsc/data.hpp"
#include "tsc/network.hpp"
#include "tsc/optim.hpp"

namespace tsc {

struct TrainConfig {
  NetworkSpec spec;
  ctrl::ControllerConfig controller;
  data::DatasetConfig dataset;
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  optim::LrSchedule lr = optim::LrSchedule::halves_and_quarters(0.1, 100);
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;

  void validate() const {
    spec.validate();
    lr.validate();
    if (epochs == 0) throw std::invalid_argument("TrainConfig: epochs must be positive");
    if (batch_size == 0) throw std::invalid_argument("TrainConfig: batch_size must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("TrainConfig: momentum must be in [0,1)");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("TrainConfig: weight_decay must be >= 0");
    if (controller.kind == ControllerKind::fixed && !(controller.fixed_step > 0.0)) {
      throw std::invalid_argument("TrainConfig: fixed step must be positive");
    }
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;  ///< mean over the epoch's mini-batches
  double train_accuracy = 0.0;
  double test_loss = 0.0;
  double test_accuracy = 0.0;
  double evolution_time = 0.0;  ///< T after the epoch

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct StepSummary {
  std::size_t stage = 0;
  std::size_t block = 0;
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
  std::vector<double> dt;

  friend bool operator==(const StepSummary&, const StepSummary&) = default;
};

inline std::vector<StepSummary> summarize_steps(const Network& net) {
  std::vector<StepSummary> out;
  for (const StepRow& r : export_step_sizes(net)) {
    out.push_back(StepSummary{r.stage, r.block, r.mean, r.min, r.max, r.dt.storage()});
  }
  return out;
}

struct RunRecord {
  double initial_loss = 0.0;  ///< training-set loss before the first update (eval mode)
  std::vector<EpochRecord> epochs;
  std::vector<StepSummary> final_steps;
  double wall_time_seconds = 0.0;

  /// Wall time is measured, not computed, so it takes no part in equality.
  friend bool operator==(const RunRecord& a, const RunRecord& b) {
    return a.initial_loss == b.initial_loss && a.epochs == b.epochs && a.final_steps == b.final_steps;
  }
};

struct TrainResult {
  RunRecord record;
  Network network;
  data::DataSplit data;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
};

/// Mean loss and accuracy in eval mode. With `noise_std > 0` each input
/// value gets independent N(0, noise_std²) noise drawn from `rng`.
inline Evaluation evaluate(Network& net, const data::Dataset& d, std::size_t batch_size = 256,
                           double noise_std = 0.0, Rng* rng = nullptr) {
  if (noise_std > 0.0 && rng == nullptr) throw std::invalid_argument("evaluate: noise requires an rng");
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  double loss = 0.0;
  std::size_t correct = 0;
  std::vector<int> labels;
  ForwardOptions opt;
  opt.mode = Mode::eval;
  for (std::size_t start = 0; start < d.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, d.size() - start);
    Tensor batch = data::gather_batch(d, std::span<const std::size_t>(order).subspan(start, n), labels);
    if (noise_std > 0.0)
      for (double& v : batch.storage()) v += normal(*rng, 0.0, noise_std);
    ad::Tape tape;
    const ForwardResult r = network_forward(net, tape, batch, opt);
    loss += ad::softmax_cross_entropy(r.logits, labels).value().item() * static_cast<double>(n);
    const Tensor& lg = r.logits.value();
    const std::size_t K = lg.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < K; ++k)
        if (lg[i * K + k] > lg[i * K + best]) best = k;
      correct += static_cast<int>(best) == labels[i] ? 1 : 0;
    }
  }
  return Evaluation{loss / static_cast<double>(d.size()),
                    static_cast<double>(correct) / static_cast<double>(d.size())};
}

/// One Nesterov step on a mini-batch; returns the batch loss and writes the
/// number of correct predictions.
inline double train_step(Network& net, const Tensor& batch, std::span<const int> labels,
                         std::vector<Tensor>& velocity, double lr, double momentum, double weight_decay,
                         std::size_t* correct = nullptr) {
  ad::Tape tape;
  ForwardOptions opt;
  opt.mode = Mode::train;
  const ForwardResult r = network_forward(net, tape, batch, opt);
  const ad::Var loss = ad::softmax_cross_entropy(r.logits, labels);
  tape.backward(loss);
  if (velocity.empty())
    for (const auto& p : net.params) velocity.emplace_back(p.value.shape());
  for (std::size_t i = 0; i < net.params.size(); ++i) {
    Parameter& p = net.params[i];
    optim::nesterov_update(p.value, tape.grad(r.params[i]), velocity[i], lr, momentum,
                           p.decays() ? weight_decay : 0.0);
  }
  if (correct) {
    const Tensor& lg = r.logits.value();
    const std::size_t K = lg.dim(1);
    *correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < K; ++k)
        if (lg[i * K + k] > lg[i * K + best]) best = k;
      *correct += static_cast<int>(best) == labels[i] ? 1 : 0;
    }
  }
  return loss.value().item();
}

/// Checks that the spec's input matches the data sample shape and class count.
inline void check_compatible(const NetworkSpec& spec, const data::Dataset& d) {
  const Shape s = d.sample_shape();
  if (s[0] != spec.input_channels || s[1] != spec.input_height || s[2] != spec.input_width) {
    throw std::invalid_argument("network input " + std::to_string(spec.input_channels) + "x" +
                                std::to_string(spec.input_height) + "x" + std::to_string(spec.input_width) +
                                " does not match data samples " + shape_str(s));
  }
  if (d.num_classes != spec.num_classes) {
    throw std::invalid_argument("network has " + std::to_string(spec.num_classes) + " classes, data has " +
                                std::to_string(d.num_classes));
  }
}

/// Seeds derived from TrainConfig::seed.
namespace seeds {
inline std::uint64_t data(std::uint64_t s) { return fork_seed(s, 1); }
inline std::uint64_t network(std::uint64_t s) { return fork_seed(s, 2); }
inline std::uint64_t shuffle(std::uint64_t s, std::size_t epoch) { return fork_seed(s, 100 + epoch); }
inline std::uint64_t augment(std::uint64_t s, std::size_t epoch) { return fork_seed(s, 1000000 + epoch); }
}  // namespace seeds

/// Trains network and controller jointly on the configured dataset. The
/// result is a function of the config alone (wall time aside).
inline TrainResult train(const TrainConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult out{{}, {}, data::make_dataset(cfg.dataset, seeds::data(cfg.seed))};
  const data::Dataset& tr = out.data.train;
  check_compatible(cfg.spec, tr);
  out.network = build_network(cfg.spec, cfg.controller, seeds::network(cfg.seed));
  Network& net = out.network;
  out.record.initial_loss = evaluate(net, tr).loss;

  std::vector<Tensor> velocity;
  std::vector<std::size_t> order(tr.size());
  std::vector<int> labels;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(seeds::shuffle(cfg.seed, epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    Rng augment_rng(seeds::augment(cfg.seed, epoch));
    const double lr = cfg.lr.at(epoch);
    double loss_sum = 0.0;
    std::size_t correct = 0, step = 0;
    for (std::size_t start = 0; start < tr.size(); start += cfg.batch_size, ++step) {
      const std::size_t n = std::min(cfg.batch_size, tr.size() - start);
      Tensor batch = data::gather_batch(tr, std::span<const std::size_t>(order).subspan(start, n), labels);
      if (cfg.dataset.random_flip) data::random_horizontal_flip(batch, augment_rng);
      std::size_t c = 0;
      double loss = 0.0;
      try {
        loss = train_step(net, batch, labels, velocity, lr, cfg.momentum, cfg.weight_decay, &c);
      } catch (const NumericError& e) {
        throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) + ", step " +
                               std::to_string(step) + ": " + e.what());
      }
      if (!std::isfinite(loss)) {
        throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) + ", step " +
                               std::to_string(step) + ": loss is not finite");
      }
      loss_sum += loss * static_cast<double>(n);
      correct += c;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(tr.size());
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(tr.size());
    try {
      const Evaluation te = evaluate(net, out.data.test);
      rec.test_loss = te.loss;
      rec.test_accuracy = te.accuracy;
      rec.evolution_time = evolution_time(net);
    } catch (const NumericError& e) {
      throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) + ", after step " +
                             std::to_string(step - 1) + " (test evaluation): " + e.what());
    }
    out.record.epochs.push_back(rec);
  }
  out.record.final_steps = summarize_steps(net);
  out.record.wall_time_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

struct NoisePoint {
  double sigma = 0.0;
  double accuracy = 0.0;  ///< mean over trials
  double loss = 0.0;
};

/// Test accuracy and loss under additive Gaussian input noise (in
/// normalized units), averaged over `trials` independent draws per level.
inline std::vector<NoisePoint> noise_sweep(Network& net, const data::Dataset& test, std::span<const double> levels,
                                           std::size_t trials, std::uint64_t seed) {
  if (trials == 0) throw std::invalid_argument("noise_sweep: trials must be positive");
  std::vector<NoisePoint> out;
  for (std::size_t l = 0; l < levels.size(); ++l) {
    if (!(levels[l] >= 0.0)) throw std::invalid_argument("noise_sweep: noise levels must be >= 0");
    NoisePoint p{levels[l], 0.0, 0.0};
    const std::size_t reps = levels[l] == 0.0 ? 1 : trials;
    for (std::size_t t = 0; t < reps; ++t) {
      Rng rng(fork_seed(fork_seed(seed, l), t));
      const Evaluation e = evaluate(net, test, 256, levels[l], &rng);
      p.accuracy += e.accuracy;
      p.loss += e.loss;
    }
    p.accuracy /= static_cast<double>(reps);
    p.loss /= static_cast<double>(reps);
    out.push_back(p);
  }
  return out;
}

struct DepthCell {
  std::size_t blocks_per_stage = 0;
  std::string variant;  ///< "baseline" (Δt ≡ 1) or the controller kind
  std::vector<double> accuracies;  ///< one per seed
  double mean = 0.0;
  double stddev = 0.0;  ///< sample standard deviation (0 for one seed)
};

inline void mean_sd(std::span<const double> v, double& mean, double& sd) {
  mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - mean) * (x - mean);
  sd = v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0;
}

/// Final test accuracy against depth for the Δt ≡ 1 baseline and the
/// configured controller. Every stage of the base spec gets the listed
/// number of blocks.
inline std::vector<DepthCell> depth_sweep(const TrainConfig& base, std::span<const std::size_t> blocks_per_stage,
                                          std::span<const std::uint64_t> seeds_list) {
  if (seeds_list.empty()) throw std::invalid_argument("depth_sweep: need at least one seed");
  std::vector<DepthCell> out;
  for (std::size_t L : blocks_per_stage) {
    for (int variant = 0; variant < 2; ++variant) {
      TrainConfig cfg = base;
      for (auto& s : cfg.spec.stages) s.num_blocks = L;
      DepthCell cell;
      cell.blocks_per_stage = L;
      if (variant == 0) {
        cfg.controller.kind = ControllerKind::fixed;
        cfg.controller.fixed_step = 1.0;
        cell.variant = "baseline";
      } else {
        cell.variant = to_string(cfg.controller.kind);
      }
      for (std::uint64_t s : seeds_list) {
        cfg.seed = s;
        cell.accuracies.push_back(train(cfg).record.epochs.back().test_accuracy);
      }
      mean_sd(cell.accuracies, cell.mean, cell.stddev);
      out.push_back(std::move(cell));
    }
  }
  return out;
}

}  // namespace tsc
